"""Stacking ensembles: sum member softmax outputs and take the argmax."""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import arch, metrics
from .errors import BadArg, FormatError, MissingChannel, NoData
from .sigdata import ChannelKind, Recording, kinds_name, parse_kinds, window_batch
from .train import iter_eval_batches


@dataclass(frozen=True)
class Member:
    name: str
    config: arch.ModelConfig
    params: arch.ModelParams
    kinds: tuple[ChannelKind, ...]
    checkpoint: str | None = None

    @classmethod
    def load(cls, path, kinds: Sequence[ChannelKind] | str | None = None,
             name: str | None = None) -> "Member":
        ck = arch.load_checkpoint(path)
        if kinds is None:
            if not ck.signals:
                raise FormatError("checkpoint does not record its signals; pass them explicitly",
                                  str(path), "signals")
            kinds = ck.signals
        kinds = tuple(parse_kinds(kinds))
        if len(kinds) != ck.config.input_channels:
            raise BadArg(f"{path}: {len(kinds)} signals for a {ck.config.input_channels}-channel model")
        return cls(name or Path(path).stem, ck.config, ck.params, kinds, str(path))

    @property
    def params_total(self) -> int:
        return arch.param_count(self.config).total_params

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        return arch.forward(self.config, self.params, x)


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[Member, ...]

    def __post_init__(self):
        if not self.members:
            raise BadArg("an ensemble needs at least one member")

    @property
    def name(self) -> str:
        return "+".join(m.name for m in self.members)

    @property
    def params_total(self) -> int:
        return sum(m.params_total for m in self.members)


def _check_channels(member: Member, rec: Recording) -> None:
    for k in member.kinds:
        if k not in rec.channels:
            raise MissingChannel(
                f"member {member.name} needs {k.value}, missing from recording {rec.patient_id}"
            )


def ensemble_predict(spec: EnsembleSpec, recording: Recording, epoch_index: int) -> tuple[int, np.ndarray]:
    """Predicted class and the summed member probability vector for one epoch."""
    parts = []
    for member in spec.members:
        _check_channels(member, recording)
        x = window_batch(recording, [epoch_index], member.kinds)
        parts.append(member.probabilities(x))
    pred, scores = combine(parts)
    return int(pred[0]), scores[0]


def member_scores(member: Member, recordings: Sequence[Recording], batch_size: int = 64) -> np.ndarray:
    """``(n_scored_epochs, classes)`` probabilities over all scored epochs, recording order."""
    for rec in recordings:
        _check_channels(member, rec)
    out = [member.probabilities(b.x) for b in iter_eval_batches(recordings, member.kinds, batch_size)]
    if not out:
        raise NoData("no scored epochs in the evaluation set")
    return np.concatenate(out)


def truth_labels(recordings: Sequence[Recording]) -> np.ndarray:
    return np.concatenate([r.hypnogram[r.scored_epochs()] for r in recordings]).astype(np.int64)


def combine(scores: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Sum member score matrices; argmax ties go to the lowest class index."""
    total = np.zeros_like(scores[0], dtype=np.float64)
    for s in scores:
        total += s
    return total.argmax(axis=1), total


def predict_all(spec: EnsembleSpec, recordings: Sequence[Recording]) -> tuple[np.ndarray, np.ndarray]:
    return combine([member_scores(m, recordings) for m in spec.members])


def enumerate_ensembles(members: Sequence[Member], sizes) -> list[EnsembleSpec]:
    """Every subset of each requested size, lexicographic by member index."""
    n = len(members)
    sizes = sorted(set(int(s) for s in sizes))
    for s in sizes:
        if not 1 <= s <= n:
            raise BadArg(f"ensemble size {s} outside 1..{n}")
    return [EnsembleSpec(tuple(members[i] for i in combo))
            for s in sizes for combo in itertools.combinations(range(n), s)]


@dataclass
class ComparisonRow:
    members: str
    accuracy: float
    kappa: float | None
    f1_macro: float
    params_total: int


def compare(specs: Sequence[EnsembleSpec], recordings: Sequence[Recording]) -> list[ComparisonRow]:
    """Score every ensemble on the same epochs; rows ranked by macro-F1, best first."""
    truth = truth_labels(recordings) if recordings else np.empty(0, np.int64)
    if truth.size == 0:
        raise NoData("empty test set")
    cache: dict[int, np.ndarray] = {}
    rows = []
    for spec in specs:
        parts = []
        for m in spec.members:
            if id(m) not in cache:
                cache[id(m)] = member_scores(m, recordings)
            parts.append(cache[id(m)])
        pred, _ = combine(parts)
        rep = metrics.report(metrics.ConfusionMatrix.from_pairs(pred, truth))
        rows.append(ComparisonRow(spec.name, rep.accuracy, rep.kappa, rep.f1_macro, spec.params_total))
    # stable sort keeps enumeration order among equal scores
    return sorted(rows, key=lambda r: -r.f1_macro)


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["members", "accuracy", "kappa", "f1_macro", "params_total"])
    for r in rows:
        w.writerow([r.members, f"{r.accuracy:.6f}", "" if r.kappa is None else f"{r.kappa:.6f}",
                    f"{r.f1_macro:.6f}", r.params_total])
    return buf.getvalue()


def write_comparison(rows: Sequence[ComparisonRow], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(comparison_csv(rows))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# ensemble.json


def spec_to_json(spec: EnsembleSpec) -> str:
    return json.dumps({"members": [
        {"checkpoint": m.checkpoint, "signals": [k.value for k in m.kinds], "name": m.name}
        for m in spec.members
    ]}, indent=1) + "\n"


def spec_from_json(path) -> EnsembleSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        entries = doc["members"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read ensemble spec: {exc}", str(path)) from exc
    members = []
    for i, e in enumerate(entries):
        if "checkpoint" not in e or "signals" not in e:
            raise FormatError(f"member {i} needs checkpoint and signals", str(path), f"members[{i}]")
        ck = Path(e["checkpoint"])
        if not ck.is_absolute():
            ck = path.parent / ck
        members.append(Member.load(ck, e["signals"], e.get("name")))
    return EnsembleSpec(tuple(members))


def default_member_name(kinds: Sequence[ChannelKind]) -> str:
    return kinds_name(kinds)
