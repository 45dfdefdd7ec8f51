"""``icrm`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence


from . import __version__, ann, dsp, experiment
from . import protocol as proto
from .communicator import decision_line, process_window
from .config import ConfigError, Option, RunConfig, read_config_file, to_bool, to_floats
from .labels import ClassLabel
from .signal_io import (ChannelKind, SignalIOError, channels_of_kind, load_record, save_record)
from .simulation import Pacing, PacingError, SimulationConfig, run_simulation, wall_latency_summary
from .synthetic import synthesize

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

# tuned for the synthetic corpus, where the 0.05 default stops early on a noisy plateau
SYNTHETIC_LEARNING_RATE = 0.01
SYNTHETIC_PATIENCE = 20


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _nonneg_int(text) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _pos_int(text) -> int:
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _pos_float(text) -> float:
    v = float(text)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _probability(text) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise ValueError("must lie in [0, 1)")
    return v


def _label(text) -> ClassLabel:
    return ClassLabel.parse(text)


PIPELINE = (
    Option("factor", _pos_int, dsp.DEFAULT_FACTOR, "decimation factor"),
    Option("window_len", _pos_int, dsp.DEFAULT_WINDOW, "samples per window after decimation"),
    Option("hop", _pos_int, None, "window hop (default: non-overlapping)"),
    Option("anti_alias", to_bool, True, "low-pass before decimating"),
)
SYNTHETIC = (
    Option("synthetic_per_class", _nonneg_int, 0, "use N synthetic records per class instead of --data"),
    Option("synthetic_duration", _pos_float, 120.0, "seconds per synthetic record"),
)

COMMANDS: dict[str, tuple[str, tuple[Option, ...]]] = {
    "convert": ("convert a record between WFDB and CSV", (
        Option("in", str, None, "input record (.hea/.dat/base name or .csv)", True),
        Option("out", str, None, "output record (.csv or WFDB base/.hea)", True),
    )),
    "train": ("train the classifier and report confusion matrices", (
        Option("data", str, None, "directory of records"),
        Option("labels", str, None, "label map: record,channel,label lines"),
        *SYNTHETIC,
        Option("out", str, None, "output model file", True),
        Option("hidden", _pos_int, 10, "hidden units"),
        Option("learning_rate", _pos_float, None, "SGD step size"),
        Option("momentum", float, 0.9, "momentum coefficient"),
        Option("max_epochs", _pos_int, 1000, "epoch cap"),
        Option("patience", _nonneg_int, None, "early-stopping patience, 0 disables"),
        Option("seed", int, 0, "RNG seed for init, shuffling and the split"),
        Option("split", to_floats, (0.7, 0.15, 0.15), "train,validation,test ratios"),
        *PIPELINE,
    )),
    "eval": ("evaluate a model on labeled records", (
        Option("model", str, None, "model file", True),
        Option("data", str, None, "directory of records"),
        Option("labels", str, None, "label map (default: <data>/labels.csv)"),
        *SYNTHETIC,
        Option("out", str, None, "also write the confusion matrix here"),
        *PIPELINE,
    )),
    "classify": ("classify every window of one record", (
        Option("model", str, None, "model file", True),
        Option("in", str, None, "input record", True),
        Option("lead", _nonneg_int, None, "channel index (default: first ECG lead)"),
        Option("out", str, None, "write report lines here instead of stdout"),
        *PIPELINE,
    )),
    "synth": ("write a synthetic record", (
        Option("class", _label, None, "afb, afl or nsr", True),
        Option("duration", _pos_float, 10.0, "seconds"),
        Option("seed", int, 0, "RNG seed"),
        Option("kind", ChannelKind.parse, ChannelKind.SurfaceECG, "ecg or egm"),
        Option("sampling_rate", _pos_float, 1000.0, "Hz"),
        Option("out", str, None, "output record (.csv or WFDB base/.hea)", True),
    )),
    "simulate": ("run the emulated devices and the Communicator", (
        Option("ecg_record", str, None, "ECG record streamed by the monitor", True),
        Option("egm_record", str, None, "EGM record streamed by the sensor"),
        Option("model", str, None, "model file", True),
        Option("loss", _probability, 0.0, "per-frame loss probability on every link"),
        Option("delay_ms", float, 5.0, "link latency"),
        Option("jitter_ms", float, 2.0, "uniform latency jitter half-width"),
        Option("seed", int, 0, "RNG seed for links and sync tokens"),
        Option("pace", str, "fast", "realtime, xN or fast"),
        Option("lead", _nonneg_int, None, "ECG channel (default: first ECG lead)"),
        Option("compression", to_bool, True, "delta-varint DATA payloads"),
        Option("samples_per_frame", _pos_int, 64, "samples per DATA frame"),
        Option("k", _pos_int, 3, "consecutive decisions needed for a command"),
        Option("theta", float, 0.8, "confidence threshold"),
        Option("window_len", _pos_int, dsp.DEFAULT_WINDOW, "classifier window"),
        Option("latency_report", to_bool, False, "also write wall-clock latency.json"),
        Option("out", str, None, "output directory", True),
    )),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icrm", description="Wireless cardiac rhythm management emulator")
    parser.add_argument("--version", action="version", version=f"icrm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (helptext, options) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", help="key=value config file; flags take precedence")
        for o in options:
            if o.parse is to_bool:
                p.add_argument(o.flag, dest=o.key, nargs="?", const="true", default=None,
                               metavar="BOOL", help=o.help)
            else:
                p.add_argument(o.flag, dest=o.key, default=None, help=o.help)
    return parser


# --------------------------------------------------------------------------- helpers


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_model(path) -> ann.Network:
    return ann.load_network(_read_bytes(path))


def _load(path):
    if not Path(path).exists() and not Path(str(path) + ".hea").exists():
        raise DataError(f"no such record: {path}")
    return load_record(path)


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="ascii", newline="\n")


def _echo_beside(cfg: RunConfig, out: str):
    p = Path(out)
    _write_text(p.with_name(p.name + ".config.txt"), cfg.echo())


def _pipeline(cfg: RunConfig) -> experiment.PipelineConfig:
    return experiment.PipelineConfig(cfg["factor"], cfg["window_len"], cfg["hop"], cfg["anti_alias"])


def _dataset(cfg: RunConfig, pipe: experiment.PipelineConfig) -> ann.LabeledDataset:
    if cfg["data"] is not None:
        data = Path(cfg["data"])
        if not data.is_dir():
            raise DataError(f"not a directory: {data}")
        labels = Path(cfg["labels"]) if cfg["labels"] else data / "labels.csv"
        text = _read_bytes(labels).decode("utf-8", errors="replace")
        mapping = experiment.read_label_map(text)
        if not mapping:
            raise DataError(f"label map {labels} is empty")
        return experiment.dataset_from_records(experiment.labeled_records(data, mapping), pipe)
    if cfg["synthetic_per_class"]:
        return experiment.synthetic_dataset(cfg["synthetic_per_class"], cfg["synthetic_duration"], pipe)
    raise UsageError("give --data (with --labels) or --synthetic-per-class")


# --------------------------------------------------------------------------- commands


def cmd_convert(cfg: RunConfig, out: Callable[[str], None]) -> int:
    record = _load(cfg["in"])
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    written = save_record(record, cfg["out"])
    _echo_beside(cfg, cfg["out"])
    out("wrote " + " ".join(str(p) for p in written))
    return EXIT_OK


def cmd_train(cfg: RunConfig, out) -> int:
    pipe = _pipeline(cfg)
    synthetic = cfg["data"] is None
    lr = cfg["learning_rate"] or (SYNTHETIC_LEARNING_RATE if synthetic else ann.NetConfig.learning_rate)
    patience = cfg["patience"]
    if patience is None:
        patience = SYNTHETIC_PATIENCE if synthetic else ann.NetConfig.patience
    try:
        net_cfg = ann.NetConfig((cfg["window_len"], cfg["hidden"], len(ClassLabel)), lr,
                                cfg["momentum"], cfg["max_epochs"], patience, cfg["seed"])
        ratios = cfg["split"]
        if len(ratios) != 3:
            raise ValueError("--split needs three ratios")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    # resolved values go into the echo so the run can be replayed from it
    cfg.values["learning_rate"], cfg.values["patience"] = lr, patience
    dataset = _dataset(cfg, pipe)
    result = experiment.run_experiment(dataset, net_cfg, ratios)
    model = Path(cfg["out"])
    model.parent.mkdir(parents=True, exist_ok=True)
    model.write_bytes(ann.save_network(result.network))
    _write_text(model.with_name(model.name + ".training.csv"), result.report.to_csv())
    summary = result.summary()
    _write_text(model.with_name(model.name + ".confusion.txt"), summary + "\n")
    _echo_beside(cfg, cfg["out"])
    out(summary)
    out(f"stopped: {result.report.stop_reason.value} after {result.report.epochs} epochs "
        f"(best {result.report.best_epoch})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out) -> int:
    net = _load_model(cfg["model"])
    if net.layer_sizes[0] != cfg["window_len"]:
        raise DataError(f"model expects {net.layer_sizes[0]}-sample windows, "
                        f"pipeline produces {cfg['window_len']}")
    table = ann.evaluate(net, _dataset(cfg, _pipeline(cfg))).format_table("confusion matrix")
    if cfg["out"]:
        _write_text(Path(cfg["out"]), table + "\n")
        _echo_beside(cfg, cfg["out"])
    out(table)
    return EXIT_OK


def classify_record(net: ann.Network, record, lead: Optional[int],
                    pipe: experiment.PipelineConfig) -> list[str]:
    if lead is None:
        lead = (channels_of_kind(record.header, ChannelKind.SurfaceECG) or [0])[0]
    if not 0 <= lead < record.header.num_signals:
        raise DataError(f"record has no channel {lead}")
    x = dsp.decimate(record.channels[lead], pipe.factor, pipe.anti_alias)
    hop = pipe.hop or pipe.window_len
    period_ms = 1000.0 * pipe.factor / record.sampling_rate
    lines = []
    for k, row in enumerate(dsp.window_matrix(x, pipe.window_len, hop)):
        start = k * hop
        d = process_window(net, row, k, start * period_ms, (start + pipe.window_len) * period_ms)
        lines.append(decision_line(int(round(d.stop_ms)), "1", d))
    return lines


def cmd_classify(cfg: RunConfig, out) -> int:
    net = _load_model(cfg["model"])
    pipe = _pipeline(cfg)
    if net.layer_sizes[0] != pipe.window_len:
        raise DataError(f"model expects {net.layer_sizes[0]}-sample windows")
    lines = classify_record(net, _load(cfg["in"]), cfg["lead"], pipe)
    text = "".join(line + "\n" for line in lines)
    if cfg["out"]:
        _write_text(Path(cfg["out"]), text)
        _echo_beside(cfg, cfg["out"])
    else:
        out(text.rstrip("\n"))
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out) -> int:
    record = synthesize(cfg["class"], cfg["duration"], cfg["seed"], cfg["sampling_rate"], cfg["kind"])
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    written = save_record(record, cfg["out"])
    _echo_beside(cfg, cfg["out"])
    out("wrote " + " ".join(str(p) for p in written))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out) -> int:
    net = _load_model(cfg["model"])
    ecg = _load(cfg["ecg_record"])
    egm = _load(cfg["egm_record"]) if cfg["egm_record"] else None
    try:
        sim_cfg = SimulationConfig(cfg["loss"], cfg["delay_ms"], cfg["jitter_ms"], cfg["seed"], cfg["pace"],
                                   cfg["lead"], cfg["compression"], cfg["samples_per_frame"],
                                   window_len=cfg["window_len"], k=cfg["k"], theta=cfg["theta"])
        Pacing.parse(sim_cfg.pace)
    except (PacingError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if net.layer_sizes[0] != sim_cfg.window_len:
        raise DataError(f"model expects {net.layer_sizes[0]}-sample windows")
    result = run_simulation(ecg, egm, net, sim_cfg)
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    (d / "hospital_report.txt").write_bytes(result.report)
    _write_text(d / "actuator_log.csv", result.actuator_log)
    _write_text(d / "metrics.json", json.dumps(result.metrics, indent=2, sort_keys=True) + "\n")
    _write_text(d / "config.txt", cfg.echo())
    if cfg["latency_report"]:
        period = sim_cfg.window_len * 1000.0 * sim_cfg.decimation / ecg.sampling_rate
        _write_text(d / "latency.json", json.dumps(wall_latency_summary(result, period), indent=2) + "\n")
    m = result.metrics
    out(f"windows {m['windows']['classified']}/{m['windows']['total']} classified, "
        f"{m['windows']['unusable']} unusable; losses {m['losses_injected']}, healed {m['gaps_healed']}; "
        f"commands {len(m['commands'])}; actuator {m['actuator']['final_state']}")
    return EXIT_OK


HANDLERS = {"convert": cmd_convert, "train": cmd_train, "eval": cmd_eval,
            "classify": cmd_classify, "synth": cmd_synth, "simulate": cmd_simulate}

DATA_ERRORS = (DataError, SignalIOError, experiment.LabelMapError, ann.ModelFormatError,
               ann.DimensionMismatch, ann.EmptyDataset, ann.EmptyTrainSet, ann.ClassTooSmall,
               dsp.CodecError, dsp.EmptySignal, proto.ProtocolError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    def out(text: str):
        print(text, file=sys.stdout)

    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        if command is None:
            raise UsageError("icrm: a subcommand is required (see icrm --help)")
        config_path = args.pop("config")
        file_values = read_config_file(config_path) if config_path else {}
        cfg = RunConfig(command, COMMANDS[command][1], args, file_values)
        return HANDLERS[command](cfg, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001  the exit-code contract covers everything else
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
