"""Recordings, stage labels, epoch windows, patient splits, synthetic PSGs and the dataset directory format."""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadIndex,
    BadSpec,
    DuplicatePatient,
    ExcludedEpoch,
    FormatError,
    IntegrityError,
    MissingChannel,
)

SAMPLE_RATE = 125
EPOCH_SECONDS = 30
SECTION_SAMPLES = SAMPLE_RATE * EPOCH_SECONDS  # 3750
CONTEXT = 2  # sections on each side of the scored epoch
SECTIONS = 2 * CONTEXT + 1
WINDOW_SAMPLES = SECTIONS * SECTION_SAMPLES  # 18750
EXCLUDED = -1
MANIFEST_VERSION = 1


class StageRK(enum.Enum):
    AWAKE = "Awake"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    REM = "REM"
    UNKNOWN = "Unknown"


class Stage(enum.IntEnum):
    """AASM stage; the integer value is the class index used everywhere."""

    AWAKE = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


NUM_CLASSES = len(Stage)
STAGE_NAMES = ["Awake", "N1", "N2", "N3", "REM"]

_RK_TO_AASM = {
    StageRK.AWAKE: Stage.AWAKE,
    StageRK.S1: Stage.N1,
    StageRK.S2: Stage.N2,
    StageRK.S3: Stage.N3,
    StageRK.S4: Stage.N3,
    StageRK.REM: Stage.REM,
    StageRK.UNKNOWN: None,
}


def map_rk_to_aasm(label: StageRK) -> Stage | None:
    """R&K -> AASM; ``None`` marks an excluded (Unknown) epoch."""
    return _RK_TO_AASM[StageRK(label)]


class ChannelKind(enum.Enum):
    EEG_C3A2 = "C3A2"
    EEG_C4A1 = "C4A1"
    EMG = "EMG"


ALL_KINDS = (ChannelKind.EEG_C3A2, ChannelKind.EEG_C4A1, ChannelKind.EMG)


def parse_kinds(spec: str | Iterable) -> list[ChannelKind]:
    """``"C4A1,EMG"`` (or a list of names/kinds) -> ordered ChannelKind list."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    kinds = []
    for item in items:
        if isinstance(item, ChannelKind):
            kinds.append(item)
            continue
        token = str(item).strip().upper()
        if token.startswith("EEG_"):
            token = token[4:]
        try:
            kinds.append(ChannelKind(token))
        except ValueError:
            raise BadSpec(f"unknown signal {item!r}; expected C3A2, C4A1 or EMG") from None
    if not kinds or len(set(kinds)) != len(kinds):
        raise BadSpec(f"signals must be a non-empty list without repeats: {spec!r}")
    return kinds


def kinds_name(kinds: Sequence[ChannelKind]) -> str:
    return "_".join(k.value for k in kinds)


@dataclass(frozen=True, eq=False)
class Recording:
    patient_id: str
    channels: dict[ChannelKind, np.ndarray]
    hypnogram: np.ndarray  # int8 class indices, EXCLUDED for unscored epochs
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise IntegrityError(f"{self.patient_id}: sample rate must be {SAMPLE_RATE} Hz")
        if not self.channels:
            raise IntegrityError(f"{self.patient_id}: recording has no channels")
        chans = {}
        lengths = set()
        for kind, sig in self.channels.items():
            arr = np.array(sig, dtype=np.float32)
            if arr.ndim != 1:
                raise IntegrityError(f"{self.patient_id}/{kind.value}: signal must be 1-D")
            arr.flags.writeable = False
            chans[ChannelKind(kind)] = arr
            lengths.add(arr.size)
        if len(lengths) != 1:
            raise IntegrityError(f"{self.patient_id}: channel lengths differ {sorted(lengths)}")
        hyp = np.array(self.hypnogram, dtype=np.int8)
        if hyp.ndim != 1 or np.any((hyp < EXCLUDED) | (hyp >= NUM_CLASSES)):
            raise IntegrityError(f"{self.patient_id}: hypnogram values must be in -1..4")
        n_epochs = lengths.pop() // SECTION_SAMPLES
        if hyp.size != n_epochs:
            raise IntegrityError(
                f"{self.patient_id}: hypnogram has {hyp.size} epochs, signal holds {n_epochs}"
            )
        hyp.flags.writeable = False
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "hypnogram", hyp)

    @property
    def epoch_count(self) -> int:
        return int(self.hypnogram.size)

    @property
    def n_samples(self) -> int:
        return next(iter(self.channels.values())).size

    def scored_epochs(self) -> np.ndarray:
        return np.flatnonzero(self.hypnogram != EXCLUDED)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.hypnogram, other.hypnogram)
            and self.channels.keys() == other.channels.keys()
            and all(
                self.channels[k].tobytes() == other.channels[k].tobytes() for k in self.channels
            )
        )

    def zscored(self) -> "Recording":
        """Copy with every channel standardised over the whole night (opt-in; off by default)."""
        chans = {}
        for kind, sig in self.channels.items():
            s = sig.astype(np.float64)
            sd = s.std()
            chans[kind] = ((s - s.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)
        return Recording(self.patient_id, chans, self.hypnogram, self.sample_rate)


@dataclass(frozen=True, eq=False)
class Example:
    window: np.ndarray  # (channels, WINDOW_SAMPLES) float32
    target: Stage
    patient_id: str
    epoch_index: int


def _check_kinds(rec: Recording, kinds: Sequence[ChannelKind]) -> None:
    for k in kinds:
        if k not in rec.channels:
            raise MissingChannel(f"recording {rec.patient_id} has no {k.value} channel")


def window_batch(rec: Recording, epoch_indices: Sequence[int], kinds: Sequence[ChannelKind],
                 out: np.ndarray | None = None) -> np.ndarray:
    """Stack the zero-padded 5-section windows for several epochs: ``(n, C, 18750)``."""
    _check_kinds(rec, kinds)
    n = len(epoch_indices)
    if out is None:
        out = np.zeros((n, len(kinds), WINDOW_SAMPLES), dtype=np.float32)
    else:
        out[...] = 0
    total = rec.epoch_count
    for row, e in enumerate(epoch_indices):
        e = int(e)
        if not 0 <= e < total:
            raise BadIndex(f"epoch {e} outside 0..{total - 1} for {rec.patient_id}")
        first = max(e - CONTEXT, 0)
        last = min(e + CONTEXT, total - 1)
        src0 = first * SECTION_SAMPLES
        src1 = (last + 1) * SECTION_SAMPLES
        dst0 = (first - (e - CONTEXT)) * SECTION_SAMPLES
        for c, kind in enumerate(kinds):
            out[row, c, dst0 : dst0 + (src1 - src0)] = rec.channels[kind][src0:src1]
    return out


def make_example(rec: Recording, epoch_index: int, kinds: Sequence[ChannelKind]) -> Example:
    _check_kinds(rec, kinds)
    if not 0 <= epoch_index < rec.epoch_count:
        raise BadIndex(f"epoch {epoch_index} outside 0..{rec.epoch_count - 1} for {rec.patient_id}")
    label = int(rec.hypnogram[epoch_index])
    if label == EXCLUDED:
        raise ExcludedEpoch(f"epoch {epoch_index} of {rec.patient_id} is excluded")
    window = window_batch(rec, [epoch_index], kinds)[0]
    window.flags.writeable = False
    return Example(window, Stage(label), rec.patient_id, int(epoch_index))


def iter_examples(rec: Recording, kinds: Sequence[ChannelKind]) -> Iterator[Example]:
    for e in rec.scored_epochs():
        yield make_example(rec, int(e), kinds)


# ---------------------------------------------------------------------------
# patient-level split


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]

    def part(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise BadSpec(f"unknown split part {name!r}")
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train": self.train, "val": self.val,
                           "test": self.test}, indent=1)

    @classmethod
    def from_json(cls, text: str, source: str = "<split>") -> "SplitSpec":
        try:
            d = json.loads(text)
            spec = cls(int(d["seed"]), list(d["train"]), list(d["val"]), list(d["test"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad split file: {exc}", source) from exc
        everyone = spec.train + spec.val + spec.test
        if len(set(everyone)) != len(everyone):
            raise FormatError("split parts overlap", source)
        return spec


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_patients(ids: Sequence[str], ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitSpec:
    """Shuffle patients by ``seed`` and cut train/val by rounded ratios; the rest is test."""
    ids = [str(i) for i in ids]
    if not ids:
        raise BadSpec("no patients to split")
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
        raise DuplicatePatient(f"duplicate patient ids: {dup}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadSpec(f"ratios must be three non-negative numbers summing to 1: {ratios}")
    ordered = sorted(ids)
    shuffled = [ordered[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n = len(ids)
    n_train = _round_half_up(ratios[0] * n)
    n_val = min(_round_half_up(ratios[1] * n), n - n_train)
    return SplitSpec(seed, shuffled[:n_train], shuffled[n_train : n_train + n_val],
                     shuffled[n_train + n_val :])


# ---------------------------------------------------------------------------
# synthetic polysomnograms


@dataclass(frozen=True)
class Band:
    center: float  # Hz
    bandwidth: float  # Hz
    amplitude: float  # RMS, microvolts


DEFAULT_TRANSITIONS = (
    (0.90, 0.06, 0.02, 0.00, 0.02),
    (0.05, 0.80, 0.12, 0.00, 0.03),
    (0.02, 0.03, 0.85, 0.07, 0.03),
    (0.02, 0.00, 0.08, 0.90, 0.00),
    (0.03, 0.04, 0.03, 0.00, 0.90),
)

_C3, _C4, _EMG = ChannelKind.EEG_C3A2, ChannelKind.EEG_C4A1, ChannelKind.EMG


def _eeg(*bands):
    return {_C3: tuple(bands), _C4: tuple(bands)}


# Amplitudes are RMS in microvolts, deliberately small so raw windows feed the
# network at unit scale without normalisation.
DEFAULT_RECIPE: dict[Stage, dict[ChannelKind, tuple[Band, ...]]] = {
    Stage.AWAKE: {**_eeg(Band(10.5, 5.0, 1.0)), _EMG: (Band(40.0, 30.0, 1.5),)},
    Stage.N1: {**_eeg(Band(6.0, 4.0, 1.0)), _EMG: (Band(40.0, 30.0, 0.6),)},
    Stage.N2: {**_eeg(Band(6.0, 4.0, 1.0), Band(13.0, 2.0, 0.75)), _EMG: (Band(40.0, 30.0, 0.6),)},
    Stage.N3: {**_eeg(Band(2.25, 3.5, 3.0)), _EMG: (Band(40.0, 30.0, 0.25),)},
    Stage.REM: {**_eeg(Band(7.0, 6.0, 0.4)), _EMG: (Band(40.0, 30.0, 0.05),)},
}


@dataclass(frozen=True)
class SynthSpec:
    num_patients: int = 10
    epochs_per_patient: int = 240
    transitions: tuple = DEFAULT_TRANSITIONS
    recipe: dict = field(default_factory=lambda: DEFAULT_RECIPE)
    noise_floor: float = 0.1
    seed: int = 0
    kinds: tuple = ALL_KINDS

    def validate(self) -> None:
        if self.num_patients < 1 or self.epochs_per_patient < 1:
            raise BadSpec("num_patients and epochs_per_patient must be >= 1")
        T = np.asarray(self.transitions, dtype=np.float64)
        if T.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(T < 0):
            raise BadSpec("transition matrix must be 5x5 and non-negative")
        if np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-9):
            raise BadSpec(f"transition rows must sum to 1, got {T.sum(axis=1)}")
        if self.noise_floor <= 0:
            raise BadSpec("noise floor amplitude must be > 0")
        for stage in Stage:
            bands = self.recipe.get(stage)
            if bands is None:
                raise BadSpec(f"recipe has no entry for {stage.name}")
            for kind in self.kinds:
                for b in bands.get(kind, ()):
                    if b.amplitude <= 0 or b.bandwidth <= 0 or b.center < 0:
                        raise BadSpec(f"bad band {b} for {stage.name}/{kind.value}")


def _band_noise(rng: np.random.Generator, n: int, band: Band) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    lo = max(band.center - band.bandwidth / 2, 0.0)
    hi = band.center + band.bandwidth / 2
    spec[(freqs < lo) | (freqs > hi)] = 0
    sig = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(sig**2))
    return sig * (band.amplitude / rms) if rms > 0 else sig


def synth_recording(spec: SynthSpec, patient_id: str, rng: np.random.Generator) -> Recording:
    T = np.asarray(spec.transitions, dtype=np.float64)
    n = spec.epochs_per_patient
    stages = np.empty(n, dtype=np.int8)
    stages[0] = Stage.AWAKE
    for e in range(1, n):
        stages[e] = rng.choice(NUM_CLASSES, p=T[stages[e - 1]])
    gain = rng.uniform(0.85, 1.15)
    chans = {}
    for kind in spec.kinds:
        sig = np.empty(n * SECTION_SAMPLES, dtype=np.float64)
        for e in range(n):
            seg = rng.standard_normal(SECTION_SAMPLES) * spec.noise_floor
            for band in spec.recipe[Stage(stages[e])].get(kind, ()):
                seg += gain * _band_noise(rng, SECTION_SAMPLES, band)
            sig[e * SECTION_SAMPLES : (e + 1) * SECTION_SAMPLES] = seg
        chans[kind] = sig.astype(np.float32)
    return Recording(patient_id, chans, stages)


def synth_dataset(spec: SynthSpec) -> list[Recording]:
    """Deterministic synthetic cohort: Markov hypnograms plus band-limited noise per stage."""
    spec.validate()
    width = max(3, len(str(spec.num_patients - 1)))
    recs = []
    for i in range(spec.num_patients):
        rng = np.random.default_rng([spec.seed, i])
        recs.append(synth_recording(spec, f"p{i:0{width}d}", rng))
    return recs


# ---------------------------------------------------------------------------
# dataset directory: manifest.json + <patient>_<kind>.f32 + <patient>.hyp

_HYP_TOKENS = {"W": 0, "N1": 1, "N2": 2, "N3": 3, "R": 4, "X": EXCLUDED}
_HYP_OUT = {v: k for k, v in _HYP_TOKENS.items()}


def _safe_id(pid: str) -> str:
    if not pid or any(c in pid for c in "/\\\0") or pid in (".", ".."):
        raise FormatError(f"patient id {pid!r} cannot be used in a file name", field="patients")
    return pid


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def manifest_write(recordings: Sequence[Recording], directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    patients = []
    kinds_seen: list[str] = []
    for rec in recordings:
        pid = _safe_id(rec.patient_id)
        files = {}
        for kind, sig in rec.channels.items():
            name = f"{pid}_{kind.value}.f32"
            _atomic_write(d / name, sig.astype("<f4").tobytes())
            files[kind.value] = name
            if kind.value not in kinds_seen:
                kinds_seen.append(kind.value)
        hyp_name = f"{pid}.hyp"
        _atomic_write(d / hyp_name, "".join(f"{_HYP_OUT[int(v)]}\n" for v in rec.hypnogram).encode())
        patients.append({"id": pid, "channels": files, "hypnogram": hyp_name})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "sample_rate": SAMPLE_RATE,
        "channel_kinds": [k.value for k in ALL_KINDS if k.value in kinds_seen],
        "patients": patients,
    }
    _atomic_write(d / "manifest.json", (json.dumps(manifest, indent=1) + "\n").encode())
    return d / "manifest.json"


def _read_hypnogram(path: Path) -> np.ndarray:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read hypnogram: {exc}", str(path)) from exc
    out = np.empty(len(lines), dtype=np.int8)
    for i, line in enumerate(lines):
        token = line.strip()
        if token not in _HYP_TOKENS:
            raise FormatError(f"unknown stage token {token!r} on line {i + 1}", str(path),
                              f"line {i + 1}")
        out[i] = _HYP_TOKENS[token]
    return out


def manifest_read(directory, patients: Iterable[str] | None = None) -> list[Recording]:
    """Load recordings (all, or only ``patients`` in manifest order)."""
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise FormatError("manifest.json not found", str(mpath)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}", str(mpath)) from exc
    for key in ("sample_rate", "patients"):
        if key not in manifest:
            raise FormatError(f"missing field {key!r}", str(mpath), key)
    if manifest["sample_rate"] != SAMPLE_RATE:
        raise FormatError(f"sample_rate must be {SAMPLE_RATE}", str(mpath), "sample_rate")
    wanted = None if patients is None else set(patients)
    recs = []
    for idx, entry in enumerate(manifest["patients"]):
        for key in ("id", "channels", "hypnogram"):
            if key not in entry:
                raise FormatError(f"patient entry {idx} lacks {key!r}", str(mpath),
                                  f"patients[{idx}].{key}")
        pid = _safe_id(str(entry["id"]))
        if wanted is not None and pid not in wanted:
            continue
        chans = {}
        for kind_name, fname in entry["channels"].items():
            try:
                kind = ChannelKind(kind_name)
            except ValueError:
                raise FormatError(f"unknown channel kind {kind_name!r}", str(mpath),
                                  f"patients[{idx}].channels") from None
            fpath = d / fname
            try:
                chans[kind] = np.fromfile(fpath, dtype="<f4").astype(np.float32)
            except (FileNotFoundError, ValueError) as exc:
                raise FormatError(f"cannot read signal: {exc}", str(fpath)) from exc
        hyp = _read_hypnogram(d / entry["hypnogram"])
        lengths = {k.value: v.size for k, v in chans.items()}
        if len(set(lengths.values())) > 1:
            raise IntegrityError(f"{pid}: channel files differ in length {lengths}")
        n_epochs = next(iter(lengths.values()), 0) // SECTION_SAMPLES
        if hyp.size != n_epochs:
            raise IntegrityError(
                f"{pid}: {entry['hypnogram']} has {hyp.size} epochs but signals hold {n_epochs}"
            )
        recs.append(Recording(pid, chans, hyp))
    if wanted is not None:
        missing = wanted - {r.patient_id for r in recs}
        if missing:
            raise IntegrityError(f"patients not in dataset: {sorted(missing)[:5]}")
    return recs


def patient_ids(directory) -> list[str]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        return [str(p["id"]) for p in manifest["patients"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot list patients: {exc}", str(d / "manifest.json")) from exc
