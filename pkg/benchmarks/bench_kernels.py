"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N time per call for each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from icrm import kernels


def cases(rng):
    frame = rng.integers(0, 256, 1024, dtype=np.uint8).tobytes()
    ecg = np.cumsum(rng.integers(-40, 41, 4096)).astype(np.int16)
    n_in, n_h, n_out, n = 106, 10, 3, 500
    X = np.ascontiguousarray(rng.normal(size=(n, n_in)))
    T = np.eye(n_out)[rng.integers(0, n_out, n)]
    order = rng.permutation(n).astype(np.int64)

    def crc(impl):
        return lambda: impl.crc16_ccitt(frame)

    def encode(impl):
        return lambda: impl.encode_deltas(ecg)

    def decode(impl):
        buf = bytes(impl.encode_deltas(ecg))
        return lambda: impl.decode_deltas(buf, 0, int(ecg[0]), ecg.size)

    def sgd(impl):
        params = [rng.normal(0, 0.1, s) for s in ((n_h, n_in), (n_h,), (n_out, n_h), (n_out,))]
        vel = [np.zeros_like(p) for p in params]
        return lambda: impl.sgd_epoch(*params, *vel, X, T, order, 0.01, 0.9, kernels.OUTPUT_SOFTMAX)

    return {
        "crc16 (1024 B)": crc,
        "encode_deltas (4096 samples)": encode,
        "decode_deltas (4096 samples)": decode,
        "sgd_epoch (500 x 106-10-3)": sgd,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; showing the Python backend only")
    rng = np.random.default_rng(0)
    names = list(backends)
    print(f"{'kernel':32}" + "".join(f"{n:>14}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, build in cases(rng).items():
        times = {}
        for name, impl in backends.items():
            fn = build(impl)
            number = 1 if "sgd" in label and name == "python" else 20
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            times[name] = best
        row = f"{label:32}" + "".join(f"{times[n] * 1e3:>11.3f} ms" for n in names)
        if len(names) > 1:
            row += f"   {times['python'] / times['compiled']:>6.0f}x"
        print(row)


if __name__ == "__main__":
    main()
