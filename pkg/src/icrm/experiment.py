"""The offline classification experiment: records -> windows -> split -> train -> evaluate.

Shared by the CLI ``train``/``eval`` commands and the acceptance suite.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ann, dsp
from .labels import ClassLabel
from .signal_io import ChannelKind, SignalIOError, SignalRecord, channels_of_kind, load_record
from .synthetic import synthesize

RECORD_SUFFIXES = (".hea", ".csv")


@dataclass(frozen=True)
class PipelineConfig:
    factor: int = dsp.DEFAULT_FACTOR
    window_len: int = dsp.DEFAULT_WINDOW
    hop: Optional[int] = None
    anti_alias: bool = True
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)


def record_windows(record: SignalRecord, channel: int, config: PipelineConfig = PipelineConfig()
                   ) -> np.ndarray:
    """Normalized classifier inputs from one channel, one row per window."""
    x = dsp.decimate(record.channels[channel], config.factor, config.anti_alias)
    rows = dsp.window_matrix(x, config.window_len, config.hop)
    return dsp.normalize(rows) if len(rows) else rows


def dataset_from_records(items: Iterable[tuple[SignalRecord, int, ClassLabel]],
                         config: PipelineConfig = PipelineConfig()) -> ann.LabeledDataset:
    parts = []
    hop = config.hop or config.window_len
    for record, channel, label in items:
        rows = record_windows(record, channel, config)
        if not len(rows):
            continue
        label = ClassLabel.parse(label)
        sources = tuple((record.name, channel, k * hop) for k in range(len(rows)))
        parts.append(ann.LabeledDataset(rows, np.full(len(rows), int(label)), sources))
    return ann.LabeledDataset.concat(parts)


def synthetic_dataset(n_per_class: int = 100, duration_s: float = 10.0,
                      config: PipelineConfig = PipelineConfig()) -> ann.LabeledDataset:
    """Seeds 0.. for AFB, then AFL, then NSR: 300 records in the default sizing."""
    items = []
    for c, label in enumerate(ClassLabel):
        for i in range(n_per_class):
            items.append((synthesize(label, duration_s, seed=c * n_per_class + i), 0, label))
    return dataset_from_records(items, config)


@dataclass
class ExperimentResult:
    network: ann.Network
    report: ann.TrainingReport
    splits: tuple[ann.LabeledDataset, ann.LabeledDataset, ann.LabeledDataset]
    matrices: dict[str, ann.ConfusionMatrix]

    def summary(self) -> str:
        blocks = [self.matrices[k].format_table(f"{k} confusion matrix")
                  for k in ("train", "validation", "test", "all")]
        return "\n".join(blocks)


def run_experiment(dataset: ann.LabeledDataset, net_config: ann.NetConfig,
                   ratios=(0.7, 0.15, 0.15), split_seed: Optional[int] = None) -> ExperimentResult:
    seed = net_config.seed if split_seed is None else split_seed
    tr, va, te = ann.split_dataset(dataset, ratios, seed)
    net, report = ann.train(tr, va, te, net_config)
    matrices = {"train": ann.evaluate(net, tr), "validation": ann.evaluate(net, va),
                "test": ann.evaluate(net, te), "all": ann.evaluate(net, dataset)}
    return ExperimentResult(net, report, (tr, va, te), matrices)


# --------------------------------------------------------------------------- labeled directories


class LabelMapError(ValueError):
    pass


def read_label_map(text: str) -> list[tuple[str, Optional[int], ClassLabel]]:
    """Lines ``record,channel,label``; an empty or ``*`` channel means every ECG lead."""
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise LabelMapError(f"line {n}: expected record,channel,label")
        name, chan, label = parts
        if n == 1 and label.lower() == "label":
            continue
        try:
            channel = None if chan in ("", "*") else int(chan)
            out.append((name, channel, ClassLabel.parse(label)))
        except ValueError as exc:
            raise LabelMapError(f"line {n}: {exc}") from None
    return out


def find_record(directory: Path, name: str) -> Path:
    for suffix in RECORD_SUFFIXES:
        p = directory / (name + suffix)
        if p.exists():
            return p
    raise SignalIOError(f"record {name!r} not found in {directory}")


def labeled_records(directory, label_map: Sequence[tuple[str, Optional[int], ClassLabel]]):
    directory = Path(directory)
    cache: dict[str, SignalRecord] = {}
    for name, channel, label in label_map:
        if name not in cache:
            cache[name] = load_record(find_record(directory, name))
        record = cache[name]
        if channel is None:
            chans = channels_of_kind(record.header, ChannelKind.SurfaceECG) or [0]
        else:
            if not 0 <= channel < record.header.num_signals:
                raise SignalIOError(f"{name}: no channel {channel}")
            chans = [channel]
        for c in chans:
            yield record, c, label


def physiobank_dir() -> Optional[Path]:
    """Directory of locally provided PhysioBank records, if configured."""
    value = os.environ.get("ICRM_PHYSIOBANK_DIR")
    return Path(value) if value else None
