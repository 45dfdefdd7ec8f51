"""Independent reference computations used as test oracles."""
import numpy as np

from icrm import ann


def reference_loss(params, x, target, output, dtype=np.longdouble):
    """Forward pass and squared-error loss written independently of ``icrm.ann``."""
    W1, b1, W2, b2 = (np.asarray(p, dtype=dtype) for p in params)
    X = np.atleast_2d(np.asarray(x, dtype=dtype))
    T = np.asarray(target, dtype=dtype).reshape(X.shape[0], -1)
    total = dtype(0)
    for row, t in zip(X, T):
        h = np.tanh(W1 @ row + b1)
        z = W2 @ h + b2
        if output == "softmax":
            e = np.exp(z - z.max())
            y = e / e.sum()
        else:
            y = 1 / (1 + np.exp(-z))
        total += np.mean((y - t) ** 2)
    return total


def finite_difference_gradient(net, x, target, h=1e-5, dtype=np.longdouble):
    """Central differences of the reference loss over every parameter.

    The loss is evaluated in extended precision so that cancellation in
    ``f(p+h) - f(p-h)`` does not swamp small gradient entries.
    """
    params = [getattr(net, n).astype(dtype) for n in ("W1", "b1", "W2", "b2")]
    step = dtype(h)
    flat = []
    for p in params:
        g = np.zeros(p.shape, dtype=dtype)
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + step
            up = reference_loss(params, x, target, net.output_activation, dtype)
            p[i] = keep - step
            down = reference_loss(params, x, target, net.output_activation, dtype)
            p[i] = keep
            g[i] = (up - down) / (2 * step)
        flat.append(g.ravel())
    return np.concatenate(flat).astype(np.float64)


def max_relative_error(analytic, numeric, floor=0.0):
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(denom > 0, np.abs(a - n) / denom, 0.0)
    return float(rel.max())


def random_net(rng, sizes, output="softmax", scale=1.0):
    n_in, n_h, n_out = sizes
    return ann.Network(
        rng.normal(0, scale, (n_h, n_in)), rng.normal(0, scale, n_h),
        rng.normal(0, scale, (n_out, n_h)), rng.normal(0, scale, n_out),
        "tanh", output,
    )


def brute_force_policy(decisions, k=3, theta=0.8):
    """Command list from a direct scan of the debounce rule.

    ``decisions`` holds ``(label, confidence)`` tuples or ``None`` for skipped
    windows. Returns ``(window_index, command_name)`` pairs.
    """
    commands = []
    mode = "idle"
    for w in range(len(decisions)):
        d = decisions[w]
        if d is None or d[1] < theta:
            continue
        # length of the qualifying run ending here, counted back to the last reset
        run = 0
        j = w
        while j >= 0 and decisions[j] is not None and decisions[j][1] >= theta \
                and decisions[j][0] == d[0]:
            run += 1
            j -= 1
        since_cmd = [c for c in commands if c[0] > j]
        consumed = since_cmd[-1][0] if since_cmd else j
        if w - consumed != k:
            continue
        label = d[0]
        if label == "NSR" and mode != "idle":
            commands.append((w, "StandDown")); mode = "idle"
        elif label == "AFL" and mode != "pacing":
            commands.append((w, "Pace")); mode = "pacing"
        elif label == "AFB":
            if mode == "armed":
                commands.append((w, "ConfirmShock")); mode = "delivered"
            else:
                commands.append((w, "ArmShock")); mode = "armed"
    return commands


def count_peaks(x, high, low):
    """Upward crossings of ``high``, re-armed only after the signal drops below ``low``."""
    armed, count = True, 0
    for v in x:
        if armed and v > high:
            count += 1
            armed = False
        elif not armed and v < low:
            armed = True
    return count
