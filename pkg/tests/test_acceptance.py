"""Exit criteria AC-1 .. AC-9. Each test reports one PASS/FAIL line in the run summary."""
import contextlib
import io
import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from icrm import ann, cli, dsp, experiment
from icrm import protocol as proto
from icrm import synthetic as sy
from icrm.devices import EmulatorConfig
from icrm.labels import ClassLabel
from icrm.protocol import Frame, MsgType
from icrm.signal_io import save_record, to_digital

from oracles import finite_difference_gradient, max_relative_error, random_net

pytestmark = pytest.mark.acceptance

GOLDEN = Path(__file__).parent / "data" / "golden_frame.txt"
WINDOW_PERIOD_MS = 106 * 8.0  # 106 samples at 125 Hz


class Criterion:
    def __init__(self, name, lines):
        self.name = name
        self.lines = lines
        self.details: list[str] = []
        self.t0 = time.perf_counter()

    def note(self, text):
        self.details.append(text)

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0


@pytest.fixture
def criterion(acceptance_lines):
    @contextlib.contextmanager
    def make(name):
        c = Criterion(name, acceptance_lines)
        try:
            yield c
        except pytest.skip.Exception:
            line = f"{name} SKIP  " + "; ".join(c.details)
            acceptance_lines.append(line)
            print(line)
            raise
        except BaseException:
            line = f"{name} FAIL  " + "; ".join(c.details)
            acceptance_lines.append(line)
            print(line)
            raise
        line = f"{name} PASS  " + "; ".join(c.details)
        acceptance_lines.append(line)
        print(line)

    return make


def _cli(*args, cwd=None):
    out, err = io.StringIO(), io.StringIO()
    old = os.getcwd()
    try:
        if cwd:
            os.chdir(cwd)
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = cli.main(list(args))
    finally:
        os.chdir(old)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """The AC-3 model, trained once through the CLI and shared by AC-7..AC-9."""
    d = tmp_path_factory.mktemp("ac_model")
    t0 = time.perf_counter()
    code, out, err = _cli("train", "--synthetic-per-class", "100", "--synthetic-duration", "120",
                          "--seed", "42", "--out", str(d / "model.icrm"))
    assert code == 0, err
    return d / "model.icrm", out, time.perf_counter() - t0


# --------------------------------------------------------------------------- AC-1


def test_ac1_gradient_check(criterion):
    with criterion("AC-1") as c:
        rng = np.random.default_rng(20)
        worst = 0.0
        for i in range(20):
            sizes = (int(rng.integers(1, 11)), int(rng.integers(1, 9)), int(rng.integers(1, 4)))
            output = "softmax" if sizes[2] > 1 and i % 4 else "sigmoid"
            net = random_net(rng, sizes, output, scale=0.5)
            x = rng.normal(size=(int(rng.integers(1, 4)), sizes[0]))
            t = rng.random((x.shape[0], sizes[2]))
            analytic = ann.gradient(net, x, t).flat()
            numeric = finite_difference_gradient(net, x, t, h=1e-5)
            worst = max(worst, max_relative_error(analytic, numeric, floor=1e-8))
        c.note(f"max relative error {worst:.2e} (< 1e-6) over 20 nets")
        c.note(f"{c.elapsed:.1f} s (< 10 s)")
        assert worst < 1e-6
        assert c.elapsed < 10


# --------------------------------------------------------------------------- AC-2


def test_ac2_xor(criterion):
    with criterion("AC-2") as c:
        X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        data = ann.LabeledDataset(X, [0, 1, 1, 0], targets=[[0.0], [1.0], [1.0], [0.0]])
        cfg = ann.NetConfig(layer_sizes=(2, 4, 1), learning_rate=0.5, max_epochs=10_000,
                            patience=0, seed=42, output_activation="sigmoid")
        net, report = ann.train(data, None, None, cfg)
        below = next((i + 1 for i, v in enumerate(report.train_mse) if v < 0.01), None)
        final = ann.mse(net, data)
        pred = (ann.forward(net, X).ravel() > 0.5).astype(int).tolist()
        c.note(f"MSE < 0.01 first at epoch {below}, final {final:.2e}")
        c.note(f"predictions {pred}")
        c.note(f"{c.elapsed:.2f} s (< 5 s)")
        assert below is not None and below <= 10_000
        assert final < 0.01
        assert pred == [0, 1, 1, 0]
        assert c.elapsed < 5


# --------------------------------------------------------------------------- AC-3


def test_ac3_synthetic_experiment(criterion):
    with criterion("AC-3") as c:
        data = experiment.synthetic_dataset(n_per_class=100, duration_s=120.0)
        cfg = ann.NetConfig((106, 10, 3), learning_rate=0.01, patience=20, seed=42)
        result = experiment.run_experiment(data, cfg, (0.7, 0.15, 0.15))
        acc = result.matrices["test"].accuracy
        sizes = [len(s) for s in result.splits]
        c.note(f"test accuracy {acc:.4f} (>= 0.99) on {sizes[2]} windows, split {sizes}")
        c.note(f"{c.elapsed:.1f} s (< 120 s)")
        print(result.summary())
        assert acc >= 0.99
        assert c.elapsed < 120


# --------------------------------------------------------------------------- AC-4


def test_ac4_physiobank(criterion):
    with criterion("AC-4") as c:
        root = experiment.physiobank_dir()
        if root is None or not (root / "labels.csv").exists():
            c.note("ICRM_PHYSIOBANK_DIR with labels.csv not provided; AC-3 governs")
            pytest.skip("PhysioBank records not available")
        mapping = experiment.read_label_map((root / "labels.csv").read_text())
        data = experiment.dataset_from_records(experiment.labeled_records(root, mapping))
        result = experiment.run_experiment(data, ann.NetConfig())
        acc = result.matrices["all"].accuracy
        print(result.summary())
        c.note(f"all-data accuracy {acc:.4f} (>= 0.90; reported figure 0.992) on {len(data)} windows")
        assert acc >= 0.90


# --------------------------------------------------------------------------- AC-5


def test_ac5_codec(criterion):
    with criterion("AC-5") as c:
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            n = int(rng.integers(1, 200))
            x = rng.integers(-32768, 32768, n).astype(np.int16)
            assert np.array_equal(dsp.decompress(dsp.compress(x)), x)
        extremes = [np.array(v, dtype=np.int16) for v in (
            [-32768], [32767], [-32768, 32767] * 50, [32767, -32768] * 50,
            [32767] * 64, [-32768] * 64, [0, 32767, -32768, 0])]
        for x in extremes:
            assert np.array_equal(dsp.decompress(dsp.compress(x)), x)
        c.note("10^4 random + 7 extreme vectors roundtrip")

        ratios = {}
        records = [sy.synthesize(label, 60, seed=s) for label in ClassLabel for s in range(3)]
        root = experiment.physiobank_dir()
        if root is not None and (root / "labels.csv").exists():
            mapping = experiment.read_label_map((root / "labels.csv").read_text())
            seen = set()
            for rec, ch, _ in experiment.labeled_records(root, mapping):
                if (rec.name, ch) not in seen:
                    seen.add((rec.name, ch))
                    ratios[f"{rec.name}:{ch} 1kHz"] = dsp.compression_ratio(to_digital(rec)[ch])
        for rec in records:
            ratios[f"{rec.name} 1kHz"] = dsp.compression_ratio(to_digital(rec)[0])
            ratios[f"{rec.name} 125Hz"] = dsp.compression_ratio(EmulatorConfig(rec).stream()[0])
        for name, r in ratios.items():
            print(f"  compression {name}: {r:.3f}")
        worst = max(ratios, key=ratios.get)
        c.note(f"worst ratio {ratios[worst]:.3f} ({worst}) over {len(ratios)} record streams (< 0.70)")
        c.note(f"{c.elapsed:.1f} s (< 30 s)")
        assert all(r < 0.70 for r in ratios.values())
        assert c.elapsed < 30


# --------------------------------------------------------------------------- AC-6


def test_ac6_protocol(criterion):
    with criterion("AC-6") as c:
        rng = np.random.default_rng(6)
        for _ in range(10_000):
            f = Frame(int(rng.integers(0, 256)), MsgType(int(rng.integers(1, 7))),
                      int(rng.integers(0, 2**16)), int(rng.integers(0, 2**32)),
                      rng.integers(0, 256, int(rng.integers(0, 1025)), dtype=np.uint8).tobytes())
            assert proto.decode_frame(proto.encode_frame(f)) == f
        c.note("10^4 random frames roundtrip")

        line = next(ln for ln in GOLDEN.read_text().splitlines() if ln and not ln.startswith("#"))
        golden = bytes.fromhex(line)
        proto.decode_frame(golden)
        missed = 0
        for pos in range(len(golden)):
            for value in range(256):
                if value == golden[pos]:
                    continue
                bad = bytearray(golden)
                bad[pos] = value
                try:
                    proto.decode_frame(bytes(bad))
                    missed += 1
                except proto.ProtocolError:
                    pass
        c.note(f"{len(golden) * 255} single-byte corruptions, {missed} undetected")

        n, p = 10_000, 0.1
        got = len(proto.lossy_link([(float(i), b"x") for i in range(n)],
                                   proto.LinkConfig(p, 5.0, 2.0, seed=6)))
        mu, sigma = n * (1 - p), np.sqrt(n * p * (1 - p))
        c.note(f"delivered {got} vs {mu:.0f} +/- {3 * sigma:.0f} (3 sigma)")
        assert missed == 0
        assert abs(got - mu) <= 3 * sigma


# --------------------------------------------------------------------------- AC-7


def _synth_pair(where: Path, label, seconds, seed):
    for kind, suffix in (("ecg", ".hea"), ("egm", "_egm.csv")):
        code, _, err = _cli("synth", "--class", label, "--duration", str(seconds), "--seed", str(seed),
                            "--kind", kind, "--out", str(where / f"{label}{suffix}"))
        assert code == 0, err
    return where / f"{label}.hea", where / f"{label}_egm.csv"


def test_ac7_end_to_end(criterion, trained, tmp_path):
    model, _, _ = trained
    with criterion("AC-7") as c:
        ecg, egm = _synth_pair(tmp_path, "afb", 60, 77)
        outs = []
        for run_dir in ("run1", "run2"):
            code, _, err = _cli("simulate", "--ecg-record", str(ecg), "--egm-record", str(egm),
                                "--model", str(model), "--loss", "0.01", "--seed", "42",
                                "--pace", "x100", "--out", str(tmp_path / run_dir))
            assert code == 0, err
            outs.append(tmp_path / run_dir)
        m = json.loads((outs[0] / "metrics.json").read_text())
        rows = [ln.split(";") for ln in (outs[0] / "hospital_report.txt").read_text().splitlines()]
        first_cmd = next(i for i, r in enumerate(rows) if r[1] == "COMMAND")
        before = rows[:first_cmd]
        c.note(f"losses injected {m['losses_injected']}, healed {m['gaps_healed']}, "
               f"unusable windows {m['windows']['unusable']}")
        c.note(f"first command {rows[first_cmd][2]} on windows {rows[first_cmd][3]} "
               f"after {[r[3] for r in before]}")
        same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
                   for f in ("hospital_report.txt", "actuator_log.csv", "metrics.json"))
        c.note(f"byte-identical across runs: {same}")
        c.note(f"{c.elapsed:.1f} s (< 60 s)")
        assert m["losses_injected"] > 0 and m["gaps_healed"] == m["losses_injected"]
        assert m["windows"]["unusable"] == 0
        assert rows[first_cmd][2] == "ArmShock" and rows[first_cmd][3] == "0,1,2"
        assert [r[3] for r in before] == ["AFB"] * 3
        assert all(float(r[4]) >= 0.8 for r in before)
        assert same
        assert c.elapsed < 60


# --------------------------------------------------------------------------- AC-8


@pytest.mark.slow
def test_ac8_realtime_budget(criterion, trained, tmp_path):
    model, _, _ = trained
    with criterion("AC-8") as c:
        ecg, egm = _synth_pair(tmp_path, "nsr", 60, 88)
        code, _, err = _cli("simulate", "--ecg-record", str(ecg), "--egm-record", str(egm),
                            "--model", str(model), "--seed", "8", "--pace", "realtime",
                            "--latency-report", "--out", str(tmp_path / "rt"))
        assert code == 0, err
        lat = json.loads((tmp_path / "rt" / "latency.json").read_text())
        m = json.loads((tmp_path / "rt" / "metrics.json").read_text())
        c.note(f"wall p99 {lat['p99']:.2f} ms, max {lat['max']:.2f} ms over {lat['windows']} windows "
               f"(< {WINDOW_PERIOD_MS:.0f} ms)")
        c.note(f"acquisition-to-decision p99 {m['sim_latency_ms']['p99']:.0f} ms simulated")
        c.note(f"run took {c.elapsed:.0f} s wall")
        assert lat["window_period_ms"] == WINDOW_PERIOD_MS
        assert lat["windows"] == m["windows"]["classified"] > 60
        assert lat["p99"] < WINDOW_PERIOD_MS
        assert m["sim_latency_ms"]["p99"] < WINDOW_PERIOD_MS


# --------------------------------------------------------------------------- AC-9


def _tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_ac9_determinism(criterion, trained, tmp_path):
    model, _, _ = trained
    with criterion("AC-9") as c:
        commands = [
            ["synth", "--class", "afl", "--duration", "20", "--seed", "3", "--out", "afl.hea"],
            ["synth", "--class", "afb", "--duration", "20", "--seed", "4", "--kind", "egm",
             "--out", "afb_egm.csv"],
            ["convert", "--in", "afl.hea", "--out", "conv/afl.csv"],
            ["train", "--data", "data", "--labels", "data/labels.csv", "--max-epochs", "20",
             "--seed", "5", "--out", "trained/m.icrm"],
            ["eval", "--model", "model.icrm", "--data", "data", "--out", "eval.txt"],
            ["classify", "--model", "model.icrm", "--in", "afl.hea", "--out", "classify.txt"],
            ["simulate", "--ecg-record", "afl.hea", "--egm-record", "afb_egm.csv", "--model",
             "model.icrm", "--loss", "0.05", "--seed", "9", "--pace", "x200", "--out", "sim"],
        ]
        trees, stdouts = [], []
        for k in ("a", "b"):
            d = tmp_path / k
            (d / "data").mkdir(parents=True)
            shutil.copy(model, d / "model.icrm")
            for label in ("afb", "afl", "nsr"):
                save_record(sy.synthesize(label, 20, seed=11), d / "data" / f"{label}.hea")
            (d / "data" / "labels.csv").write_text("afb,0,afb\nafl,0,afl\nnsr,0,nsr\n")
            outs = []
            for argv in commands:
                code, out, err = _cli(*argv, cwd=d)
                assert code == 0, (argv, err)
                outs.append(out)
            trees.append(_tree(d))
            stdouts.append(outs)
        differing = sorted(k for k in trees[0] if trees[0][k] != trees[1].get(k))
        c.note(f"{len(commands)} invocations across 6 subcommands, {len(trees[0])} files compared")
        c.note(f"differing files: {differing or 'none'}; stdout identical: {stdouts[0] == stdouts[1]}")
        assert set(trees[0]) == set(trees[1])
        assert not differing
        assert stdouts[0] == stdouts[1]
