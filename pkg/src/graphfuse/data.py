"""Recording ingestion, cross-subject splits and a synthetic multimodal generator."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gtn
from .errors import ConfigError, DataError
from .fusion import (
    IMU,
    RGB,
    SKELETON,
    FusionPlan,
    ModalityBlock,
    align_blocks,
    fuse_combined,
    resample_time,
)
from .graph import SkeletonGraph, chain_graph

logger = logging.getLogger(__name__)


# -- CSV loaders ---------------------------------------------------------------
def _rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            yield lineno, header, row


def load_skeleton_csv(path, num_joints: Optional[int] = None) -> ModalityBlock:
    """Read ``frame, person, joint, c0, c1, ...`` rows into an (M, C, T, N) block.

    Frame and person ids are re-indexed in sorted order; a gap in frame ids is
    closed with a warning. Joints absent from a frame are left as zeros.
    """
    records = {}
    n_coords = None
    for lineno, header, row in _rows(path):
        if n_coords is None:
            n_coords = len(header) - 3
            if n_coords < 1:
                raise DataError(f"{path}: header needs frame, person, joint and coordinate columns")
        if len(row) != n_coords + 3:
            raise DataError(f"{path}:{lineno}: expected {n_coords + 3} columns, got {len(row)}")
        try:
            key = (int(row[0]), int(row[1]), int(row[2]))
            coords = [float(v) for v in row[3:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed row {row}") from None
        if key in records:
            raise DataError(f"{path}:{lineno}: duplicate (frame, person, joint) {key}")
        if min(key) < 0:
            raise DataError(f"{path}:{lineno}: negative index in {key}")
        records[key] = coords
    if not records:
        raise DataError(f"{path}: no skeleton rows")

    frames = sorted({k[0] for k in records})
    persons = sorted({k[1] for k in records})
    n = num_joints if num_joints is not None else max(k[2] for k in records) + 1
    if max(k[2] for k in records) >= n:
        raise DataError(f"{path}: joint index exceeds num_joints={n}")
    if frames != list(range(frames[0], frames[0] + len(frames))):
        logger.warning("%s: non-contiguous frame indices re-indexed", path)
    f_idx = {f: i for i, f in enumerate(frames)}
    p_idx = {p: i for i, p in enumerate(persons)}
    out = np.zeros((len(persons), n_coords, len(frames), n), dtype=np.float32)
    for (f, p, j), coords in records.items():
        out[p_idx[p], :, f_idx[f], j] = coords
    missing = len(persons) * len(frames) * n - len(records)
    if missing:
        logger.warning("%s: %d missing (frame, person, joint) slots filled with zeros", path, missing)
    return ModalityBlock(SKELETON, out)


def write_skeleton_csv(path, block: ModalityBlock) -> None:
    x = block.tensor.data
    m, c, t, n = x.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "person", "joint"] + [f"c{i}" for i in range(c)])
        for f in range(t):
            for p in range(m):
                for j in range(n):
                    w.writerow([f, p, j] + [repr(float(v)) for v in x[p, :, f, j]])


def load_imu_csv(path, sensor_order: Sequence[str], known_sensors: Optional[Sequence[str]] = None) -> ModalityBlock:
    """Read ``t_index, sensor_id, x, y, z`` rows into a (1, 3, S, T) block.

    Sensors are stacked in ``sensor_order``; other sensors in the file are
    skipped. If ``known_sensors`` is given, any sensor id outside it is a data
    error. Streams are sorted by time index and resampled to the longest
    stream's length.
    """
    known = set(known_sensors) if known_sensors is not None else None
    if known is not None and not set(sensor_order) <= known:
        raise ConfigError(f"selected sensors {sorted(set(sensor_order) - known)} are not known sensors")
    streams: Dict[str, List[Tuple[int, List[float]]]] = {s: [] for s in sensor_order}
    for lineno, _, row in _rows(path):
        if len(row) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
        sensor = row[1].strip()
        if known is not None and sensor not in known:
            raise DataError(f"{path}:{lineno}: unknown sensor id {sensor!r}")
        if sensor not in streams:
            continue
        try:
            streams[sensor].append((int(row[0]), [float(v) for v in row[2:]]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed row {row}") from None
    for s, rows in streams.items():
        if not rows:
            raise DataError(f"{path}: sensor {s!r} has no samples")
        idx = [r[0] for r in rows]
        if idx != sorted(idx):
            logger.warning("%s: sensor %r timestamps out of order; sorted", path, s)
            rows.sort(key=lambda r: r[0])
        if len(set(idx)) != len(idx):
            raise DataError(f"{path}: sensor {s!r} has duplicate time indices")
    t = max(len(r) for r in streams.values())
    stacked = []
    for s in sensor_order:
        arr = np.array([v for _, v in streams[s]], dtype=np.float64).T  # (3, T_s)
        stacked.append(resample_time(arr, t, axis=1).data)
    out = np.stack(stacked, axis=1)[None].astype(np.float32)  # (1, 3, S, T)
    return ModalityBlock(IMU, out)


def write_imu_csv(path, block: ModalityBlock, sensor_ids: Sequence[str]) -> None:
    x = block.tensor.data
    _, c, s, t = x.shape
    if len(sensor_ids) != s:
        raise ConfigError(f"{len(sensor_ids)} sensor ids for {s} sensors")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_index", "sensor_id", "x", "y", "z"])
        for si, name in enumerate(sensor_ids):
            for ti in range(t):
                w.writerow([ti, name] + [repr(float(v)) for v in x[0, :, si, ti]])


# -- manifest and splits ---------------------------------------------------------
@dataclass
class Recording:
    sample_id: str
    subject: int
    label: int
    skeleton: str
    imu: Optional[str] = None
    rgb: Optional[str] = None


@dataclass
class Manifest:
    classes: List[str]
    recordings: List[Recording]
    sensors: List[str] = field(default_factory=list)
    root: str = "."

    def path(self, rel: Optional[str]) -> Optional[str]:
        if rel is None:
            return None
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "sensors": self.sensors,
            "recordings": [
                {k: v for k, v in vars(r).items() if v is not None} for r in self.recordings
            ],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def load_manifest(path, check_files: bool = True) -> Manifest:
    with open(path) as fh:
        d = json.load(fh)
    try:
        classes = list(d["classes"])
        raw = d["recordings"]
    except KeyError as exc:
        raise ConfigError(f"{path}: manifest missing {exc}") from None
    recs = []
    for r in raw:
        label = r["label"]
        if isinstance(label, str):
            if label not in classes:
                raise DataError(f"{path}: recording {r.get('sample_id')} has unknown class {label!r}")
            label = classes.index(label)
        if not 0 <= int(label) < len(classes):
            raise DataError(f"{path}: recording {r.get('sample_id')} label {label} out of range")
        recs.append(
            Recording(str(r["sample_id"]), int(r["subject"]), int(label), r["skeleton"], r.get("imu"), r.get("rgb"))
        )
    m = Manifest(classes, recs, list(d.get("sensors", [])), os.path.dirname(os.path.abspath(path)))
    if check_files:
        for rec in recs:
            for p in (rec.skeleton, rec.imu, rec.rgb):
                if p is not None and not os.path.exists(m.path(p)):
                    raise DataError(f"{path}: recording {rec.sample_id} references missing file {p}")
    return m


@dataclass
class SplitSpec:
    train_subjects: Tuple[int, ...]
    test_subjects: Tuple[int, ...]
    protocol: str = "cross_subject"

    def __post_init__(self):
        self.train_subjects = tuple(int(s) for s in self.train_subjects)
        self.test_subjects = tuple(int(s) for s in self.test_subjects)
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ConfigError(f"subjects {sorted(overlap)} are in both train and test")
        if not self.test_subjects:
            raise ConfigError("split has an empty test subject set")
        if not self.train_subjects:
            raise ConfigError("split has an empty train subject set")


def utd_mhad_split(subjects: Sequence[int] = range(1, 9)) -> SplitSpec:
    """Odd-numbered subjects train, even-numbered subjects test."""
    subjects = list(subjects)
    return SplitSpec(tuple(s for s in subjects if s % 2), tuple(s for s in subjects if s % 2 == 0))


def apply_split(recordings: Sequence, spec: SplitSpec):
    """Partition recordings (anything with a ``subject``) by subject."""
    train_s, test_s = set(spec.train_subjects), set(spec.test_subjects)
    seen = {r.subject for r in recordings}
    stray = seen - train_s - test_s
    if stray:
        raise ConfigError(f"subjects {sorted(stray)} are not assigned to train or test")
    for s in sorted((train_s | test_s) - seen):
        logger.warning("subject %d has no samples", s)
    train = [r for r in recordings if r.subject in train_s]
    test = [r for r in recordings if r.subject in test_s]
    if not test:
        raise ConfigError("split leaves the test set empty")
    return train, test


# -- in-memory datasets ----------------------------------------------------------------
@dataclass
class ArrayDataset:
    """Batched fused inputs ``x`` (B, M, C, T, N) with labels and optional RGB (B, T, F)."""

    x: np.ndarray
    y: np.ndarray
    graph: SkeletonGraph
    subjects: Optional[np.ndarray] = None
    ids: Optional[List[str]] = None
    rgb: Optional[np.ndarray] = None
    classes: Optional[List[str]] = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "ArrayDataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ArrayDataset(
            self.x[idx],
            self.y[idx],
            self.graph,
            None if self.subjects is None else self.subjects[idx],
            None if self.ids is None else [self.ids[i] for i in idx],
            None if self.rgb is None else self.rgb[idx],
            self.classes,
        )

    def save(self, prefix) -> None:
        """``<prefix>.gtn`` holds x; ``<prefix>.json`` the labels and graph."""
        gtn.save(f"{prefix}.gtn", self.x)
        if self.rgb is not None:
            gtn.save(f"{prefix}.rgb.gtn", self.rgb)
        side = {
            "labels": [int(v) for v in self.y],
            "graph": self.graph.to_dict(),
            "subjects": None if self.subjects is None else [int(s) for s in self.subjects],
            "ids": self.ids,
            "classes": self.classes,
            "has_rgb": self.rgb is not None,
        }
        with open(f"{prefix}.json", "w") as fh:
            json.dump(side, fh, indent=2)

    @classmethod
    def load(cls, prefix) -> "ArrayDataset":
        with open(f"{prefix}.json") as fh:
            side = json.load(fh)
        x = gtn.load(f"{prefix}.gtn")
        rgb = gtn.load(f"{prefix}.rgb.gtn") if side.get("has_rgb") else None
        return cls(
            x,
            np.asarray(side["labels"], dtype=np.int64),
            SkeletonGraph.from_dict(side["graph"]),
            None if side.get("subjects") is None else np.asarray(side["subjects"]),
            side.get("ids"),
            rgb,
            side.get("classes"),
        )


def pad_or_crop(x: np.ndarray, length: int, axis: int) -> np.ndarray:
    """Zero-pad at the end or crop ``axis`` to ``length``."""
    t = x.shape[axis]
    if t >= length:
        return np.take(x, np.arange(length), axis=axis)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, length - t)
    return np.pad(x, widths)


def fuse_blocks(
    skeletons: Sequence[ModalityBlock],
    imus: Sequence[Optional[ModalityBlock]],
    rgbs: Sequence[Optional[ModalityBlock]],
    labels: Sequence[int],
    graph: SkeletonGraph,
    plan: FusionPlan,
    max_frames: Optional[int] = None,
    subjects=None,
    ids=None,
    classes=None,
) -> ArrayDataset:
    """Align, fuse and batch a list of recordings.

    Per-node RGB features are fused in the plan; flat per-frame RGB features
    (T, F) are carried through as ``rgb`` for the model's trainable projection.
    """
    xs, flat_rgb, graph_out = [], [], None
    for sk, imu, rgb in zip(skeletons, imus, rgbs):
        sk, imu, rgb = align_blocks(sk, imu, rgb, plan.frame_stride)
        per_node = None
        if rgb is not None:
            if rgb.layout == ("T", "F"):
                flat_rgb.append(rgb.tensor.data)
            else:
                per_node = rgb
        fused = fuse_combined(sk, per_node, imu if plan.imu_mode != "off" else None, plan, graph)
        xs.append(fused.tensor.data)
        graph_out = fused.graph
    if not xs:
        raise DataError("no recordings to fuse")
    t = max_frames or max(x.shape[2] for x in xs)
    x = np.stack([pad_or_crop(v, t, axis=2) for v in xs]).astype(np.float32)
    rgb_arr = None
    if flat_rgb:
        if len(flat_rgb) != len(xs):
            raise DataError("only some recordings carry flat RGB features")
        rgb_arr = np.stack([pad_or_crop(v, t, axis=0) for v in flat_rgb]).astype(np.float32)
    return ArrayDataset(
        x,
        np.asarray(labels, dtype=np.int64),
        graph_out,
        None if subjects is None else np.asarray(subjects),
        None if ids is None else list(ids),
        rgb_arr,
        classes,
    )


def load_recordings(manifest: Manifest, recordings: Sequence[Recording], num_joints: Optional[int] = None, sensors: Optional[Sequence[str]] = None):
    """Load the modality blocks of each recording; returns parallel lists."""
    sensors = list(sensors) if sensors is not None else manifest.sensors
    sk, imu, rgb = [], [], []
    for rec in recordings:
        sk.append(load_skeleton_csv(manifest.path(rec.skeleton), num_joints))
        imu.append(load_imu_csv(manifest.path(rec.imu), sensors, manifest.sensors or None) if rec.imu and sensors else None)
        if rec.rgb:
            feat = gtn.load(manifest.path(rec.rgb))
            rgb.append(ModalityBlock(RGB, feat))
        else:
            rgb.append(None)
    return sk, imu, rgb


# -- synthetic data ----------------------------------------------------------------
@dataclass
class SyntheticDataset:
    """Skeleton (B, 1, 3, T, N) and IMU (B, 1, 3, S, T) arrays with labels and subjects."""

    skeleton: np.ndarray
    imu: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    graph: SkeletonGraph
    frequencies: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def imu_only_pairs(self) -> List[Tuple[int, int]]:
        """Class pairs that share a skeleton frequency and differ only in IMU offset."""
        k = len(self.frequencies)
        return [(a, b) for a in range(k) for b in range(a + 1, k) if self.frequencies[a] == self.frequencies[b]]

    def blocks(self, i: int) -> Tuple[ModalityBlock, ModalityBlock]:
        return ModalityBlock(SKELETON, self.skeleton[i]), ModalityBlock(IMU, self.imu[i])


def synthesize_dataset(
    classes: int = 3,
    samples_per_class: int = 20,
    num_nodes: int = 8,
    frames: int = 32,
    sensors: int = 2,
    seed: int = 0,
    noise: float = 0.05,
    imu_scale: float = 1.0,
) -> SyntheticDataset:
    """Deterministic skeleton+IMU data where the class is encoded in both modalities.

    Class k oscillates its joints at ``1 + (k + 1) // 2`` cycles per sequence,
    so classes 1 and 2 (and 3 and 4, ...) share a frequency. Sample j of every
    class draws phases and noise from the same stream, which makes the
    skeletons of a frequency-sharing pair identical. Each class also adds a
    distinct constant offset to all IMU channels; the offset is the only
    thing separating such a pair.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    freqs = np.array([1 + (k + 1) // 2 for k in range(classes)], dtype=np.float64)
    offsets = imu_scale * (np.arange(classes) - (classes - 1) / 2.0)
    t = np.arange(frames) / frames
    ss = np.random.SeedSequence(seed)
    sample_seeds = ss.spawn(samples_per_class)

    sk = np.zeros((classes * samples_per_class, 1, 3, frames, num_nodes), dtype=np.float32)
    imu = np.zeros((classes * samples_per_class, 1, 3, sensors, frames), dtype=np.float32)
    labels = np.zeros(classes * samples_per_class, dtype=np.int64)
    subjects = np.zeros(classes * samples_per_class, dtype=np.int64)
    for j in range(samples_per_class):
        for k in range(classes):
            rng = np.random.default_rng(sample_seeds[j])
            phase = rng.uniform(0, 2 * np.pi, size=(3, 1, num_nodes))
            amp = rng.uniform(0.5, 1.0, size=(3, 1, num_nodes))
            sk_noise = noise * rng.standard_normal((3, frames, num_nodes))
            imu_noise = noise * rng.standard_normal((3, sensors, frames))
            i = k * samples_per_class + j
            sk[i, 0] = amp * np.sin(2 * np.pi * freqs[k] * t[None, :, None] + phase) + sk_noise
            imu[i, 0] = offsets[k] + imu_noise
            labels[i] = k
            subjects[i] = j % 4 + 1
    return SyntheticDataset(sk, imu, labels, subjects, chain_graph(num_nodes, center=num_nodes // 2), freqs, offsets)


def synthetic_arrays(ds: SyntheticDataset, plan: FusionPlan) -> ArrayDataset:
    """Fuse a synthetic dataset under ``plan`` into an :class:`ArrayDataset`."""
    skeletons = [ModalityBlock(SKELETON, ds.skeleton[i]) for i in range(len(ds))]
    imus = [ModalityBlock(IMU, ds.imu[i]) for i in range(len(ds))]
    return fuse_blocks(
        skeletons, imus, [None] * len(ds), ds.labels, ds.graph, plan, subjects=ds.subjects
    )


def write_synthetic(ds: SyntheticDataset, out_dir, sensor_ids: Optional[Sequence[str]] = None) -> str:
    """Write a synthetic dataset as CSV recordings plus manifest and topology; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    s = ds.imu.shape[3]
    sensor_ids = list(sensor_ids) if sensor_ids else [f"sensor{i}" for i in range(s)]
    recs = []
    for i in range(len(ds)):
        sid = f"s{i:04d}"
        sk_path, imu_path = f"{sid}_skeleton.csv", f"{sid}_imu.csv"
        sk, imu = ds.blocks(i)
        write_skeleton_csv(os.path.join(out_dir, sk_path), sk)
        write_imu_csv(os.path.join(out_dir, imu_path), imu, sensor_ids)
        recs.append(Recording(sid, int(ds.subjects[i]), int(ds.labels[i]), sk_path, imu_path))
    classes = [f"class{k}" for k in range(len(ds.frequencies))]
    manifest = Manifest(classes, recs, sensor_ids, os.path.abspath(out_dir))
    path = os.path.join(out_dir, "manifest.json")
    manifest.save(path)
    with open(os.path.join(out_dir, "topology.json"), "w") as fh:
        json.dump(ds.graph.to_dict(), fh, indent=2)
    return path


__all__ = [
    "ArrayDataset",
    "Manifest",
    "Recording",
    "SplitSpec",
    "SyntheticDataset",
    "apply_split",
    "fuse_blocks",
    "load_imu_csv",
    "load_manifest",
    "load_recordings",
    "load_skeleton_csv",
    "pad_or_crop",
    "synthesize_dataset",
    "synthetic_arrays",
    "utd_mhad_split",
    "write_imu_csv",
    "write_skeleton_csv",
    "write_synthetic",
]
