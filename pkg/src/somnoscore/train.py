"""Training protocol: patient-mixing mini-batches, Adam, validation early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import arch
from .errors import BadArg, NoData, NonFiniteGradient
from .sigdata import WINDOW_SAMPLES, ChannelKind, Recording, window_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_iterations: int = 100
    batch_size: int = 32
    patience: int = 10
    patients_per_batch: int = 1
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_iterations < 1 or self.batch_size < 1 \
                or self.patience < 1 or self.patients_per_batch < 1 or self.eval_batch_size < 1:
            raise BadArg(f"training settings must be positive: {self}")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    x: np.ndarray  # (n, C, 18750) float32
    y: np.ndarray  # (n,) int64
    patient_ids: list[str]
    epoch_indices: np.ndarray


def batch_plan(recordings: Sequence[Recording], patients_per_batch: int, batch_size: int,
               seed: int, iteration: int) -> Iterator[list[tuple[int, int]]]:
    """Yield batches as lists of ``(recording position, epoch index)``.

    Patients are shuffled per ``(seed, iteration)``; ``patients_per_batch``
    streams are open at a time, each walking one patient's scored epochs in
    shuffled order, and batches are filled round-robin across open streams.
    An exhausted stream is replaced by the next unopened patient.
    """
    if not recordings:
        raise NoData("empty training set")
    if patients_per_batch > len(recordings):
        raise BadArg(f"{patients_per_batch} patients per batch but only {len(recordings)} patients")
    rng = np.random.default_rng([seed, iteration])
    order = rng.permutation(len(recordings))
    queues = []
    for pos in order:
        epochs = recordings[pos].scored_epochs()
        queues.append((int(pos), list(rng.permutation(epochs).tolist())))
    pending = iter(queues)
    streams: list[tuple[int, list[int]]] = []

    def refill():
        while len(streams) < patients_per_batch:
            nxt = next(pending, None)
            if nxt is None:
                return
            if nxt[1]:
                streams.append((nxt[0], list(reversed(nxt[1]))))

    refill()
    batch: list[tuple[int, int]] = []
    turn = 0
    while streams:
        turn %= len(streams)
        pos, stack = streams[turn]
        batch.append((pos, stack.pop()))
        if not stack:
            streams.pop(turn)
            refill()
            # the replacement (if any) is appended; keep the rotation on the next stream
        else:
            turn += 1
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def make_batches(recordings: Sequence[Recording], patients_per_batch: int, batch_size: int,
                 kinds: Sequence[ChannelKind], seed: int, iteration: int) -> Iterator[Batch]:
    """Materialise :func:`batch_plan` into window tensors."""
    for plan in batch_plan(recordings, patients_per_batch, batch_size, seed, iteration):
        yield _materialise(recordings, plan, kinds)


def _materialise(recordings, plan, kinds) -> Batch:
    x = np.empty((len(plan), len(kinds), WINDOW_SAMPLES), dtype=np.float32)
    y = np.empty(len(plan), dtype=np.int64)
    for row, (pos, e) in enumerate(plan):
        rec = recordings[pos]
        window_batch(rec, [e], kinds, out=x[row : row + 1])
        y[row] = rec.hypnogram[e]
    return Batch(x, y, [recordings[p].patient_id for p, _ in plan],
                 np.array([e for _, e in plan], dtype=np.int64))


def iter_eval_batches(recordings: Sequence[Recording], kinds: Sequence[ChannelKind],
                      batch_size: int = 64) -> Iterator[Batch]:
    """All scored epochs in recording order, fixed-size batches (no shuffling)."""
    plan: list[tuple[int, int]] = []
    for pos, rec in enumerate(recordings):
        for e in rec.scored_epochs():
            plan.append((pos, int(e)))
            if len(plan) == batch_size:
                yield _materialise(recordings, plan, kinds)
                plan = []
    if plan:
        yield _materialise(recordings, plan, kinds)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros(a.shape) for a in arrays], [np.zeros(a.shape) for a in arrays])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, names: Sequence[str] | None = None) -> None:
    """In-place bias-corrected Adam update of ``params`` (moments kept in float64)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise BadArg("params, grads and optimiser state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise BadArg(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(names[i] if names else f"param[{i}]")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p[...] = (p.astype(np.float64) - step).astype(p.dtype)


# ---------------------------------------------------------------------------
# loss evaluation and early stopping


def evaluate_loss(config: arch.ModelConfig, params: arch.ModelParams,
                  recordings: Sequence[Recording], kinds: Sequence[ChannelKind],
                  batch_size: int = 64) -> float:
    """Example-weighted mean cross-entropy with dropout off."""
    losses = []
    for batch in iter_eval_batches(recordings, kinds, batch_size):
        z = arch.logits(config, params, batch.x, train=False, dtype=np.float32)
        losses.extend(arch.nncore.cross_entropy_from_logits(z, batch.y).tolist())
    if not losses:
        raise NoData("no scored epochs to evaluate")
    return math.fsum(losses) / len(losses)


class EarlyStopping:
    """Tracks the best (lowest) monitored value; ``update`` returns True when patience runs out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_iteration = 0
        self.wait = 0

    def update(self, iteration: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_iteration = iteration
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class FitHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_iteration: int = 0
    stop_reason: str = "max_iterations"

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else math.inf

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_loss", "val_loss", "seconds"])
            for i, (tr, va, sec) in enumerate(zip(self.train_loss, self.val_loss, self.seconds), 1):
                w.writerow([i, f"{tr:.10g}", f"{va:.10g}", f"{sec:.3f}"])
        tmp.replace(path)


def check_disjoint(**parts: Sequence[Recording]) -> None:
    seen: dict[str, str] = {}
    for name, recs in parts.items():
        for r in recs:
            if r.patient_id in seen and seen[r.patient_id] != name:
                raise BadArg(f"patient {r.patient_id} is in both {seen[r.patient_id]} and {name}")
            seen[r.patient_id] = name


def fit(config: arch.ModelConfig, tcfg: TrainConfig, train: Sequence[Recording],
        val: Sequence[Recording], kinds: Sequence[ChannelKind],
        init: arch.ModelParams | None = None, progress=None) -> tuple[arch.ModelParams, FitHistory]:
    """Train and return the parameters with the lowest validation loss.

    One iteration is a full pass over the training examples.  ``progress``,
    if given, is called as ``progress(iteration, train_loss, val_loss)``.
    """
    if len(kinds) != config.input_channels:
        raise BadArg(f"{len(kinds)} signals for a {config.input_channels}-channel model")
    check_disjoint(train=train, val=val)
    if not val:
        raise NoData("empty validation set")
    params = init.copy() if init is not None else arch.init_params(config, tcfg.seed)
    names = [n for n, _ in params.named_arrays()]
    state = AdamState.zeros_like(params.arrays())
    stopper = EarlyStopping(tcfg.patience)
    history = FitHistory()
    best = params.copy()

    for iteration in range(1, tcfg.max_iterations + 1):
        t0 = time.perf_counter()
        drop_rng = np.random.default_rng([tcfg.seed, iteration, 1])
        batch_losses = []
        n_seen = 0
        for batch in make_batches(train, tcfg.patients_per_batch, tcfg.batch_size, kinds,
                                  tcfg.seed, iteration):
            loss, grads, _ = arch.loss_and_grads(config, params, batch.x, batch.y, train=True,
                                                 rng=drop_rng)
            adam_step(params.arrays(), arch.grads_in_order(params, grads), state,
                      tcfg.learning_rate, names)
            batch_losses.append(loss * len(batch.y))
            n_seen += len(batch.y)
        train_loss = math.fsum(batch_losses) / n_seen
        val_loss = evaluate_loss(config, params, val, kinds, tcfg.eval_batch_size)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - t0)
        log.info("iteration %d train_loss %.5f val_loss %.5f (%.1fs)", iteration, train_loss,
                 val_loss, history.seconds[-1])
        if progress is not None:
            progress(iteration, train_loss, val_loss)
        improved = val_loss < stopper.best
        stop = stopper.update(iteration, val_loss)
        if improved:
            best = params.copy()
        if stop:
            history.stop_reason = "patience"
            break
    history.best_iteration = stopper.best_iteration
    return best, history
