"""Recordings, manifests, epoch segmentation, sequences, folds and the
on-disk processed dataset.

Processed dataset layout (format tag ``sleepcmt-processed/1``)::

    <dir>/index.json              format, fs, epoch_samples, modalities,
                                  config, per-recording metadata, summary
    <dir>/data/<recording>.f32    little-endian float32, shape (n, 3000, M)

Per-recording metadata holds ``subject_id``, ``recording_id``, ``file``,
``n_epochs``, ``labels`` (AASM class indices) and ``epoch_indices`` (position
of each epoch in the original hypnogram; gaps mark discarded epochs).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, InputError, IntegrityError, LabelParseError
from .signal import DISCARD, STAGE_INDEX, STAGES, design_fir_bandpass, map_labels, normalize, trim_wake, \
    zero_phase_filter

log = logging.getLogger(__name__)

FS = 100.0
EPOCH_SAMPLES = 3000
PROCESSED_FORMAT = "sleepcmt-processed/1"


@dataclass
class Recording:
    """One subject-night: raw channels plus the raw R&K hypnogram."""

    subject_id: str
    recording_id: str
    signals: dict[str, np.ndarray]
    fs: dict[str, float]
    raw_labels: list[str]


@dataclass
class EpochSample:
    signals: np.ndarray  # (3000, M)
    label: int
    subject_id: str
    epoch_index: int
    recording_id: str = ""

    @property
    def stage(self) -> str:
        return STAGES[self.label]


@dataclass
class SequenceSample:
    epochs: list[EpochSample]

    @property
    def length(self) -> int:
        return len(self.epochs)

    def signals(self) -> np.ndarray:
        return np.stack([e.signals for e in self.epochs])

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.epochs])


@dataclass
class PreprocessConfig:
    fs: float = FS
    low_hz: float = 0.2
    high_hz: float = 40.0
    numtaps: int = 1001
    # modality name -> manifest channel name
    channels: dict[str, str] = field(default_factory=lambda: {"EEG": "EEG Fpz-Cz", "EOG": "EOG horizontal"})
    filter_modalities: list[str] = field(default_factory=lambda: ["EEG"])
    wake_margin: int = 60

    @property
    def modalities(self) -> list[str]:
        return list(self.channels)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PreprocessConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown preprocess config keys: {sorted(unknown)}")
        return cls(**d)


# -- manifest ---------------------------------------------------------------

def read_manifest(path: str | Path) -> list[dict[str, Any]]:
    """Parse a manifest; relative paths are resolved against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
    entries = doc.get("recordings") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ConfigError(f"manifest {path} must be a list or have a 'recordings' list")
    base = path.parent
    out = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or not {"subject_id", "channels", "labels_path"} <= set(e):
            raise ConfigError(f"manifest entry {i} needs subject_id, channels and labels_path")
        channels = {}
        for name, spec in e["channels"].items():
            if "path" not in spec or "fs" not in spec:
                raise ConfigError(f"manifest entry {i}, channel {name!r}: needs path and fs")
            channels[name] = {"path": str(base / spec["path"]), "fs": float(spec["fs"])}
        out.append({
            "subject_id": str(e["subject_id"]),
            "recording_id": str(e.get("recording_id", f"{e['subject_id']}_{i}")),
            "channels": channels,
            "labels_path": str(base / e["labels_path"]),
        })
    return out


def read_labels(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def load_recording(entry: dict[str, Any], channels: Iterable[str] | None = None) -> Recording:
    """Read the channel files named in a manifest entry (all by default)."""
    wanted = list(entry["channels"]) if channels is None else list(channels)
    signals, fs = {}, {}
    for name in wanted:
        if name not in entry["channels"]:
            raise InputError(f"recording {entry['recording_id']}: channel {name!r} missing from manifest")
        spec = entry["channels"][name]
        signals[name] = np.fromfile(spec["path"], dtype="<f4")
        fs[name] = spec["fs"]
    return Recording(entry["subject_id"], entry["recording_id"], signals, fs, read_labels(entry["labels_path"]))


def recording_from_arrays(subject_id: str, signals: dict[str, np.ndarray], labels: Sequence[str],
                          fs: float | dict[str, float] = FS, recording_id: str | None = None) -> Recording:
    """Import hook for signals already extracted from EDF or elsewhere."""
    rates = fs if isinstance(fs, dict) else {k: float(fs) for k in signals}
    return Recording(subject_id, recording_id or subject_id,
                     {k: np.asarray(v, dtype=np.float64) for k, v in signals.items()}, rates, list(labels))


def write_manifest(path: str | Path, recordings: Sequence[Recording]) -> None:
    """Write recordings as raw float32 channel files plus a manifest."""
    path = Path(path)
    root = path.parent
    (root / "raw").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in recordings:
        stem = _safe_name(rec.recording_id)
        chans = {}
        for name, sig in rec.signals.items():
            rel = f"raw/{stem}.{_safe_name(name)}.f32"
            np.asarray(sig, dtype="<f4").tofile(root / rel)
            chans[name] = {"path": rel, "fs": rec.fs[name]}
        lab = f"raw/{stem}.labels.txt"
        (root / lab).write_text("\n".join(rec.raw_labels) + "\n", encoding="utf-8")
        entries.append({"subject_id": rec.subject_id, "recording_id": rec.recording_id,
                        "channels": chans, "labels_path": lab})
    path.write_text(json.dumps({"recordings": entries}, indent=2) + "\n", encoding="utf-8")


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s)


# -- segmentation -----------------------------------------------------------

def segment_epochs(signals: np.ndarray, labels: Sequence[str], retained: tuple[int, int],
                   subject_id: str = "", recording_id: str = "") -> list[EpochSample]:
    """Cut (n_samples, M) preprocessed signals into labelled 3000-sample epochs.

    Epoch k covers raw samples [k*3000, (k+1)*3000).  Only epochs inside the
    inclusive ``retained`` range with a non-discarded label are emitted.
    """
    if signals.shape[0] < len(labels) * EPOCH_SAMPLES:
        raise IntegrityError(
            f"recording {recording_id or subject_id}: {signals.shape[0]} samples cannot hold "
            f"{len(labels)} epochs of {EPOCH_SAMPLES}")
    start, stop = retained
    out = []
    for k in range(start, stop + 1):
        if labels[k] == DISCARD:
            continue
        out.append(EpochSample(signals[k * EPOCH_SAMPLES:(k + 1) * EPOCH_SAMPLES], STAGE_INDEX[labels[k]],
                               subject_id, k, recording_id))
    return out


@dataclass
class ProcessedRecording:
    subject_id: str
    recording_id: str
    epochs: np.ndarray        # (n, 3000, M) float32
    labels: np.ndarray        # (n,) int
    epoch_indices: np.ndarray  # (n,) int

    def samples(self) -> list[EpochSample]:
        return [EpochSample(self.epochs[i], int(self.labels[i]), self.subject_id, int(self.epoch_indices[i]),
                            self.recording_id) for i in range(len(self.labels))]

    def runs(self) -> list[slice]:
        """Maximal stretches of consecutive hypnogram positions."""
        if len(self.epoch_indices) == 0:
            return []
        breaks = np.flatnonzero(np.diff(self.epoch_indices) != 1) + 1
        edges = [0, *breaks.tolist(), len(self.epoch_indices)]
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def preprocess_recording(rec: Recording, cfg: PreprocessConfig) -> tuple[ProcessedRecording | None, dict]:
    """Filter -> normalise -> label map -> wake trim -> segment.

    Returns the processed recording (None when excluded) and a summary row.
    """
    row: dict[str, Any] = {"recording_id": rec.recording_id, "subject_id": rec.subject_id}
    aasm = map_labels(rec.raw_labels)
    chans = []
    for modality, channel in cfg.channels.items():
        if channel not in rec.signals:
            raise InputError(f"recording {rec.recording_id}: missing channel {channel!r} for {modality}")
        if rec.fs[channel] != cfg.fs:
            raise InputError(f"recording {rec.recording_id}: channel {channel!r} sampled at "
                             f"{rec.fs[channel]} Hz, expected {cfg.fs}")
        chans.append((modality, np.asarray(rec.signals[channel], dtype=np.float64)))
    n_needed = len(aasm) * EPOCH_SAMPLES
    shortest = min(len(sig) for _, sig in chans)
    if shortest < n_needed:
        raise IntegrityError(f"recording {rec.recording_id}: {len(aasm)} hypnogram epochs need {n_needed} "
                             f"samples, shortest channel has {shortest}")
    filt = design_fir_bandpass(cfg.fs, cfg.low_hz, cfg.high_hz, cfg.numtaps)
    processed = []
    for modality, sig in chans:
        sig = sig[:n_needed]
        if modality in cfg.filter_modalities:
            sig = zero_phase_filter(sig, filt)
        processed.append(normalize(sig))
    signals = np.stack(processed, axis=-1)

    retained = trim_wake(aasm, cfg.wake_margin)
    row["hypnogram_epochs"] = len(aasm)
    if retained is None:
        log.warning("event=recording_excluded recording=%s reason=all_wake", rec.recording_id)
        row.update(status="excluded", reason="no sleep epochs")
        return None, row
    samples = segment_epochs(signals, aasm, retained, rec.subject_id, rec.recording_id)
    kept = aasm[retained[0]:retained[1] + 1]
    counts = {s: 0 for s in STAGES}
    for s in samples:
        counts[s.stage] += 1
    row.update(status="ok", retained=len(kept), emitted=len(samples),
               discarded=sum(1 for s in kept if s == DISCARD), class_counts=counts,
               retained_range=list(retained))
    out = ProcessedRecording(
        rec.subject_id, rec.recording_id,
        np.stack([s.signals for s in samples]).astype(np.float32) if samples
        else np.zeros((0, EPOCH_SAMPLES, len(chans)), np.float32),
        np.array([s.label for s in samples], dtype=np.int64),
        np.array([s.epoch_index for s in samples], dtype=np.int64),
    )
    return out, row


def _preprocess_entry(args):
    entry, cfg = args
    try:
        rec = load_recording(entry, cfg.channels.values())
        return preprocess_recording(rec, cfg)
    except (InputError, IntegrityError, LabelParseError, OSError) as exc:
        return None, {"recording_id": entry["recording_id"], "subject_id": entry["subject_id"],
                      "status": "error", "reason": str(exc)}


def preprocess_manifest(manifest: str | Path, out_dir: str | Path, cfg: PreprocessConfig,
                        jobs: int = 1) -> dict:
    """Run the preprocessing chain over a manifest and write the processed dataset."""
    entries = read_manifest(manifest)
    work = [(e, cfg) for e in entries]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_preprocess_entry, work))
    else:
        results = [_preprocess_entry(w) for w in work]
    recs = [r for r, _ in results if r is not None and len(r.labels)]
    rows = [row for _, row in results]
    summary = _summarise(rows)
    write_processed(out_dir, recs, cfg, summary)
    return summary


def _summarise(rows: list[dict]) -> dict:
    totals = {s: 0 for s in STAGES}
    for row in rows:
        for s, n in row.get("class_counts", {}).items():
            totals[s] += n
    return {
        "recordings": rows,
        "class_counts": totals,
        "total_epochs": sum(totals.values()),
        "discarded": sum(r.get("discarded", 0) for r in rows),
        "excluded": [r["recording_id"] for r in rows if r["status"] == "excluded"],
        "failed": [r["recording_id"] for r in rows if r["status"] == "error"],
    }


# -- processed dataset ------------------------------------------------------

def write_processed(out_dir: str | Path, recordings: Sequence[ProcessedRecording], cfg: PreprocessConfig,
                    summary: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    meta = []
    for rec in recordings:
        rel = f"data/{_safe_name(rec.recording_id)}.f32"
        np.ascontiguousarray(rec.epochs, dtype="<f4").tofile(out / rel)
        meta.append({
            "subject_id": rec.subject_id,
            "recording_id": rec.recording_id,
            "file": rel,
            "n_epochs": int(len(rec.labels)),
            "labels": [int(v) for v in rec.labels],
            "epoch_indices": [int(v) for v in rec.epoch_indices],
        })
    index = {
        "format": PROCESSED_FORMAT,
        "version": __version__,
        "fs": cfg.fs,
        "epoch_samples": EPOCH_SAMPLES,
        "modalities": cfg.modalities,
        "config": cfg.to_dict(),
        "recordings": meta,
        "summary": summary or {},
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class ProcessedDataset:
    root: Path
    modalities: list[str]
    recordings: list[ProcessedRecording]
    summary: dict

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.recordings})

    def select(self, subjects: Iterable[str]) -> list[ProcessedRecording]:
        wanted = set(subjects)
        return [r for r in self.recordings if r.subject_id in wanted]

    def get(self, recording_id: str) -> ProcessedRecording:
        for r in self.recordings:
            if r.recording_id == recording_id:
                return r
        raise InputError(f"no recording {recording_id!r} in {self.root}")


def load_processed(path: str | Path) -> ProcessedDataset:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise InputError(f"{root} is not a processed dataset (no index.json)")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    if index.get("format") != PROCESSED_FORMAT:
        raise InputError(f"{root}: unsupported dataset format {index.get('format')!r}")
    m = len(index["modalities"])
    t = index["epoch_samples"]
    recs = []
    for meta in index["recordings"]:
        raw = np.fromfile(root / meta["file"], dtype="<f4")
        n = meta["n_epochs"]
        if raw.size != n * t * m:
            raise IntegrityError(f"{meta['file']}: expected {n * t * m} values, found {raw.size}")
        recs.append(ProcessedRecording(meta["subject_id"], meta["recording_id"],
                                       raw.reshape(n, t, m).astype(np.float32),
                                       np.asarray(meta["labels"], dtype=np.int64),
                                       np.asarray(meta["epoch_indices"], dtype=np.int64)))
    return ProcessedDataset(root, list(index["modalities"]), recs, index.get("summary", {}))


# -- sequences and folds ----------------------------------------------------

def build_sequences(recordings: Sequence[Sequence[EpochSample]], length: int,
                    mode: str = "train") -> list[SequenceSample]:
    """Windows of ``length`` consecutive epochs within each recording.

    ``train`` emits non-overlapping windows, ``inference`` every stride-1
    window.  A discarded epoch breaks contiguity, so windows never span one.
    """
    if length < 1:
        raise ConfigError(f"sequence length must be >= 1, got {length}")
    if mode not in ("train", "inference"):
        raise ConfigError(f"mode must be 'train' or 'inference', got {mode!r}")
    step = length if mode == "train" else 1
    out = []
    for epochs in recordings:
        runs, cur = [], []
        for e in epochs:
            if cur and e.epoch_index != cur[-1].epoch_index + 1:
                runs.append(cur)
                cur = []
            cur.append(e)
        if cur:
            runs.append(cur)
        for run in runs:
            if len(run) < length:
                log.info("event=run_skipped recording=%s epochs=%d length=%d",
                         run[0].recording_id or run[0].subject_id, len(run), length)
                continue
            for s in range(0, len(run) - length + 1, step):
                out.append(SequenceSample(list(run[s:s + length])))
    return out


def epoch_arrays(recordings: Sequence[ProcessedRecording]) -> tuple[np.ndarray, np.ndarray]:
    if not recordings:
        return np.zeros((0, EPOCH_SAMPLES, 0), np.float32), np.zeros(0, np.int64)
    return (np.concatenate([r.epochs for r in recordings]), np.concatenate([r.labels for r in recordings]))


def sequence_arrays(recordings: Sequence[ProcessedRecording], length: int,
                    mode: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Stacked (N, L, 3000, M) windows and (N, L) labels."""
    xs, ys = [], []
    for rec in recordings:
        for run in rec.runs():
            n = run.stop - run.start
            step = length if mode == "train" else 1
            for s in range(run.start, run.start + n - length + 1, step):
                xs.append(rec.epochs[s:s + length])
                ys.append(rec.labels[s:s + length])
    if not xs:
        return np.zeros((0, length, EPOCH_SAMPLES, 0), np.float32), np.zeros((0, length), np.int64)
    return np.stack(xs), np.stack(ys)


@dataclass
class FoldSplit:
    assignments: dict[str, int]
    k: int

    def fold_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.fold_subjects(f)) for f in range(self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "assignments": dict(sorted(self.assignments.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls({str(k): int(v) for k, v in d["assignments"].items()}, int(d["k"]))


def subject_independent_folds(subjects: Iterable[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle of the unique subjects, then round-robin into k folds."""
    uniq = sorted(set(subjects))
    if len(uniq) < k:
        raise ConfigError(f"{len(uniq)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(uniq))
    return FoldSplit({uniq[j]: i % k for i, j in enumerate(order)}, k)
