"""Video records, on-disk formats, fold splitting and the synthetic generator."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import child_rng

log = logging.getLogger(__name__)

DEFAULT_SHOT_LENGTH = 8

_FEAT_MAGIC = b"RLSF"
_FEAT_VERSION = 1


class ValidationError(ValueError):
    """Raised when a manifest fails validation; carries the full report."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__(report.describe())


@dataclass
class Issue:
    video_id: str | None
    field: str
    message: str

    def __str__(self):
        where = f"video {self.video_id!r}" if self.video_id is not None else "manifest"
        return f"{where}: {self.field}: {self.message}"


@dataclass
class ValidationReport:
    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def describe(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) if lines else "ok"


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray
    label: int | None = None
    shots: list[tuple[int, int]] = field(default_factory=list)
    human_summaries: list[list[int]] = field(default_factory=list)
    features_path: str | None = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetManifest:
    categories: list[str]
    videos: list[VideoRecord]
    prototypes: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return len(self.categories)

    def by_id(self) -> dict[str, VideoRecord]:
        return {v.id: v for v in self.videos}

    def subset(self, ids) -> "DatasetManifest":
        table = self.by_id()
        return replace(self, videos=[table[i] for i in ids])

    def normalised(self) -> "DatasetManifest":
        return replace(self, videos=[replace(v, features=l2_normalise(v.features)) for v in self.videos])

    def without_labels(self) -> "DatasetManifest":
        return replace(self, videos=[replace(v, label=None) for v in self.videos])


# ---------------------------------------------------------------------------
# features

def l2_normalise(features: np.ndarray) -> np.ndarray:
    """Scale every non-zero row to unit L2 norm; zero rows are returned as-is."""
    x = np.asarray(features, dtype=np.float64)
    # pre-scaling by the largest magnitude keeps tiny rows from underflowing when squared
    scale = np.max(np.abs(x), axis=1, keepdims=True) if x.size else np.zeros((len(x), 1))
    zero = scale[:, 0] == 0.0
    if zero.any():
        log.warning("%d zero feature row(s) left unnormalised", int(zero.sum()))
    safe = np.where(zero[:, None], 1.0, scale)
    y = x / safe
    return y / np.where(zero[:, None], 1.0, np.sqrt(np.sum(y * y, axis=1, keepdims=True)))


def zero_rows(features: np.ndarray) -> list[int]:
    return np.flatnonzero(~np.any(features != 0, axis=1)).tolist()


def write_features(path, features: np.ndarray) -> None:
    x = np.asarray(features)
    if x.ndim != 2:
        raise ValueError("features must be a T x D matrix")
    t, d = x.shape
    header = _FEAT_MAGIC + struct.pack("<IQQ", _FEAT_VERSION, t, d)
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    version, t, d = struct.unpack_from("<IQQ", data, 4)
    if version != _FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature format version {version}")
    body = data[24:]
    if len(body) != t * d * 4:
        raise ValueError(f"{path}: expected {t * d * 4} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float64)


def uniform_shots(n_frames: int, length: int = DEFAULT_SHOT_LENGTH) -> list[tuple[int, int]]:
    return [(s, min(s + length, n_frames)) for s in range(0, n_frames, length)]


# ---------------------------------------------------------------------------
# manifest

def check_shots(shots, n_frames: int) -> str | None:
    pos = 0
    for start, end in shots:
        if end <= start:
            return f"empty or inverted shot [{start},{end})"
        if start < pos:
            return f"shot [{start},{end}) overlaps the previous shot"
        if start > pos:
            return f"gap before shot [{start},{end})"
        pos = end
    if pos != n_frames:
        return f"shots end at {pos}, video has {n_frames} frames"
    return None


def validate(manifest: DatasetManifest, report: ValidationReport | None = None) -> ValidationReport:
    report = report or ValidationReport()
    seen = set()
    for v in manifest.videos:
        if v.id in seen:
            report.errors.append(Issue(v.id, "id", "duplicate video id"))
        seen.add(v.id)
        x = v.features
        if x.ndim != 2 or x.shape[0] < 1:
            report.errors.append(Issue(v.id, "features", "need at least one frame"))
            continue
        if not np.all(np.isfinite(x)):
            report.errors.append(Issue(v.id, "features", "non-finite values"))
        zeros = zero_rows(x)
        if zeros:
            report.warnings.append(Issue(v.id, "features", f"{len(zeros)} zero row(s), e.g. frame {zeros[0]}"))
        if v.label is not None and not 0 <= v.label < manifest.n_classes:
            report.errors.append(Issue(v.id, "label", f"label {v.label} outside [0, {manifest.n_classes})"))
        problem = check_shots(v.shots, x.shape[0])
        if problem:
            report.errors.append(Issue(v.id, "shots", problem))
        for k, summ in enumerate(v.human_summaries):
            bad = [f for f in summ if not 0 <= f < x.shape[0]]
            if bad:
                report.errors.append(Issue(v.id, "human_summaries", f"summary {k} has invalid frame {bad[0]}"))
    dims = {v.features.shape[1] for v in manifest.videos if v.features.ndim == 2}
    if len(dims) > 1:
        report.errors.append(Issue(None, "features", f"mixed feature dimensions {sorted(dims)}"))
    return report


def load_manifest(path, normalise: bool = True, strict: bool = True):
    """Read a manifest and its feature files.

    Returns ``(manifest, report)``. With ``strict`` a report holding errors is
    raised as :class:`ValidationError`.
    """
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    report = ValidationReport()
    categories = list(doc.get("categories", []))
    videos = []
    for entry in doc.get("videos", []):
        vid = str(entry.get("id"))
        fpath = entry.get("features_path")
        full = (path.parent / fpath) if fpath is not None else None
        if full is None or not full.is_file():
            report.errors.append(Issue(vid, "features_path", f"missing feature file {full}"))
            continue
        try:
            feats = read_features(full)
        except ValueError as exc:
            report.errors.append(Issue(vid, "features_path", str(exc)))
            continue
        shots = entry.get("shots")
        shots = [tuple(map(int, s)) for s in shots] if shots else uniform_shots(feats.shape[0])
        label = entry.get("label")
        videos.append(VideoRecord(
            id=vid,
            features=feats,
            label=None if label is None else int(label),
            shots=shots,
            human_summaries=[sorted(int(f) for f in s) for s in entry.get("human_summaries", [])],
            features_path=fpath,
        ))
    manifest = DatasetManifest(categories, videos)
    validate(manifest, report)
    if strict and not report.ok:
        raise ValidationError(report)
    if normalise:
        manifest = manifest.normalised()
    return manifest, report


def save_manifest(manifest: DatasetManifest, path, feature_dir: str = "features") -> None:
    """Write the JSON manifest plus one feature file per video next to it."""
    path = Path(path)
    (path.parent / feature_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for v in manifest.videos:
        rel = v.features_path or f"{feature_dir}/{v.id}.rlsf"
        write_features(path.parent / rel, v.features)
        entries.append({
            "id": v.id,
            "features_path": rel,
            "label": v.label,
            "shots": [list(s) for s in v.shots],
            "human_summaries": [list(s) for s in v.human_summaries],
        })
    doc = {"categories": list(manifest.categories), "videos": entries}
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# folds

@dataclass
class Fold:
    train: list[str]
    test: list[str]


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> list[Fold]:
    """Deterministic k-fold split, stratified by label when every class has >= k videos."""
    n = len(manifest.videos)
    if k < 2:
        raise ValueError("need k >= 2 folds")
    if k > n:
        raise ValueError(f"{k} folds requested for {n} videos")
    rng = child_rng(seed, "folds")
    ids = [v.id for v in manifest.videos]
    labels = [v.label for v in manifest.videos]
    groups: dict = {}
    for vid, lab in zip(ids, labels):
        groups.setdefault(lab, []).append(vid)
    stratify = None not in groups and all(len(g) >= k for g in groups.values())

    assignment: dict[str, int] = {}
    if stratify:
        offset = 0
        for lab in sorted(groups):
            members = groups[lab]
            order = rng.permutation(len(members))
            for j, idx in enumerate(order):
                assignment[members[idx]] = (offset + j) % k
            offset += len(members)
    else:
        order = rng.permutation(n)
        for j, chunk in enumerate(np.array_split(order, k)):
            for idx in chunk:
                assignment[ids[idx]] = j
    folds = []
    for j in range(k):
        test = [i for i in ids if assignment[i] == j]
        train = [i for i in ids if assignment[i] != j]
        folds.append(Fold(train, test))
    return folds


# ---------------------------------------------------------------------------
# synthetic data

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_synthetic(n_classes: int, per_class: int, n_frames: int, dim: int,
                       signal_fraction: float, noise_level: float, seed: int,
                       shot_length: int = 12, pool_size: int | None = None,
                       distractor_overlap: float = 0.7, themes_per_video: int = 1) -> DatasetManifest:
    """Category-structured sequences with a known informative subset.

    Each class owns an orthonormal prototype direction. A video of class
    ``c`` is cut into shots of ``shot_length`` frames; a ``signal_fraction``
    of the shots are noisy copies of prototype ``c`` and the rest are noisy
    copies of entries from a distractor pool shared by all classes. Pool
    entries lean towards the prototypes in turn by cosine ``distractor_overlap``,
    so a summary made mostly of distractors is easy to misclassify while
    the distractor distribution itself carries no label information.
    Frame noise is isotropic Gaussian with expected norm about ``noise_level``.
    The signal frames are stored as the video's single human summary.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if dim < n_classes:
        raise ValueError("feature dimension must be at least the number of classes")
    if not 0.0 < signal_fraction < 1.0:
        raise ValueError("signal_fraction must lie in (0, 1)")
    if per_class < 1 or n_frames < 1 or shot_length < 1:
        raise ValueError("per_class, n_frames and shot_length must be positive")
    if noise_level < 0 or not 0.0 <= distractor_overlap < 1.0:
        raise ValueError("noise_level must be >= 0 and distractor_overlap in [0, 1)")

    rng = child_rng(seed, "synthetic")
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    prototypes = basis[:, :n_classes].T.copy()
    complement = basis[:, n_classes:].T
    pool_size = pool_size or 2 * n_classes
    if len(complement):
        ortho = _unit(rng.normal(size=(pool_size, len(complement))) @ complement)
    else:
        ortho = np.zeros((pool_size, dim))
    leaning = prototypes[np.arange(pool_size) % n_classes]
    pool = _unit(distractor_overlap * leaning + math.sqrt(1.0 - distractor_overlap ** 2) * ortho)

    prototypes = prototypes.astype(np.float32).astype(np.float64)
    pool = pool.astype(np.float32).astype(np.float64)
    shots = uniform_shots(n_frames, shot_length)
    n_signal = min(len(shots) - 1, max(1, round(signal_fraction * len(shots))))
    sigma = noise_level / math.sqrt(dim)

    videos = []
    for c in range(n_classes):
        for j in range(per_class):
            vid_rng = child_rng(seed, f"synthetic/{c}/{j}")
            signal_shots = np.sort(vid_rng.choice(len(shots), size=n_signal, replace=False))
            themes = vid_rng.integers(0, pool_size, size=themes_per_video)
            feats = np.empty((n_frames, dim))
            signal = np.zeros(n_frames, dtype=bool)
            for s, (start, end) in enumerate(shots):
                if s in signal_shots:
                    base = prototypes[c]
                    signal[start:end] = True
                else:
                    base = pool[themes[vid_rng.integers(0, themes_per_video)]]
                feats[start:end] = base
            if sigma > 0:
                feats += vid_rng.normal(scale=sigma, size=feats.shape)
            feats = feats.astype(np.float32).astype(np.float64)
            videos.append(VideoRecord(
                id=f"c{c}_v{j:03d}",
                features=feats,
                label=c,
                shots=list(shots),
                human_summaries=[np.flatnonzero(signal).tolist()],
            ))
    categories = [f"category_{c}" for c in range(n_classes)]
    return DatasetManifest(categories, videos, prototypes=prototypes)
