"""Skeleton sequences, their normalization and trajectory-graph descriptors.

A sequence is ``T x J x 3`` joint coordinates. Normalization applies one
similarity transform, estimated on frame 0 from three reference joints, to the
whole clip. Each joint trajectory then becomes a graph node described by the
mean position of the joint in ``M`` equal temporal chunks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DomainError, GeometryError, ParseError, ValidationError


@dataclass
class SkeletonSequence:
    label: int
    frames: np.ndarray
    ref: tuple[int, int, int] = (0, 1, 2)
    joint_names: list[str] | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.ref = tuple(int(i) for i in self.ref)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def J(self) -> int:
        return self.frames.shape[1]

    def validate(self) -> "SkeletonSequence":
        f = self.frames
        if f.ndim != 3 or f.shape[2] != 3:
            raise ValidationError("frames", f"expected T x J x 3 coordinates, got shape {f.shape}")
        if f.shape[0] < 1:
            raise ValidationError("frames", "need at least one frame")
        if f.shape[1] < 3:
            raise ValidationError("frames", f"need at least 3 joints, got {f.shape[1]}")
        if not np.all(np.isfinite(f)):
            raise ValidationError("frames", "non-finite coordinate")
        if not isinstance(self.label, (int, np.integer)) or isinstance(self.label, bool) or self.label < 0:
            raise ValidationError("label", f"expected a non-negative integer, got {self.label!r}")
        if len(self.ref) != 3 or len(set(self.ref)) != 3:
            raise ValidationError("ref", f"expected three distinct joint indices, got {self.ref}")
        if min(self.ref) < 0 or max(self.ref) >= f.shape[1]:
            raise ValidationError("ref", f"joint index out of range for {f.shape[1]} joints")
        if self.joint_names is not None and len(self.joint_names) != f.shape[1]:
            raise ValidationError("joint_names", "one name per joint expected")
        _frame0_basis(f[0], self.ref)
        return self


@dataclass
class TrajectoryGraph:
    node_descriptors: np.ndarray
    adjacency: np.ndarray
    label: int


# -- normalization ----------------------------------------------------------


def _frame0_basis(frame0: np.ndarray, ref) -> tuple[np.ndarray, np.ndarray, float]:
    """Origin, rotation (rows = new axes) and reference length from frame 0."""
    p1, p2, p3 = (frame0[i] for i in ref)
    span = p2 - p3
    length = float(np.linalg.norm(span))
    scale = max(1.0, float(np.abs(frame0).max()))
    if length <= 1e-12 * scale:
        raise GeometryError("reference joints 2 and 3 coincide")
    origin = 0.5 * (p2 + p3)
    x = span / length
    normal = np.cross(x, p1 - origin)
    nn = float(np.linalg.norm(normal))
    if nn <= 1e-9 * max(length, float(np.linalg.norm(p1 - origin))):
        raise GeometryError("reference joints are collinear")
    z = normal / nn
    y = np.cross(z, x)
    return origin, np.stack([x, y, z]), length


def normalize(seq: SkeletonSequence, c: float = 1.0) -> SkeletonSequence:
    """Similarity-normalize a whole sequence from its frame-0 reference triplet.

    After the transform the midpoint of joints 2 and 3 is the origin, joint 2
    minus joint 3 equals ``(c, 0, 0)`` and joint 1 lies in the x-y plane with
    positive y.
    """
    origin, rot, length = _frame0_basis(seq.frames[0], seq.ref)
    frames = (c / length) * ((seq.frames - origin) @ rot.T)
    return replace(seq, frames=frames)


# -- temporal chunking ------------------------------------------------------


def chunk_weights(T: int, M: int) -> np.ndarray:
    """``T x M`` overlap of frame intervals ``[t/T, (t+1)/T)`` with chunk intervals."""
    edges_t = np.arange(T + 1) / T
    edges_m = np.arange(M + 1) / M
    lo = np.maximum(edges_t[:-1, None], edges_m[None, :-1])
    hi = np.minimum(edges_t[1:, None], edges_m[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def temporal_chunk(trajectory, M: int = 4) -> np.ndarray:
    """Concatenated per-chunk mean positions of one joint trajectory (length ``3M``).

    Each frame covers an equal slice of the clip's duration and contributes to
    a chunk in proportion to the overlap, so the descriptor does not depend on
    frame rate or on how frames fall on chunk boundaries.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] == 0:
        raise DomainError("trajectory needs at least one frame")
    if M < 1:
        raise DomainError(f"M must be >= 1, got {M}")
    w = chunk_weights(traj.shape[0], M)
    means = (w.T @ traj) / w.sum(axis=0)[:, None]
    return means.reshape(-1)


def sequence_descriptors(frames: np.ndarray, M: int = 4) -> np.ndarray:
    """``J x 3M`` descriptors for all joints of a ``T x J x 3`` clip."""
    T, J, _ = frames.shape
    w = chunk_weights(T, M)
    means = np.einsum("tm,tjd->jmd", w, frames) / w.sum(axis=0)[None, :, None]
    return means.reshape(J, 3 * M)


# -- graphs -----------------------------------------------------------------


def knn_adjacency(points: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbour graph with self-loops (ties broken by index)."""
    n = points.shape[0]
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    adj = np.eye(n)
    k = min(k, n - 1)
    for i in range(n):
        for j in np.argsort(d[i], kind="stable")[:k]:
            adj[i, j] = adj[j, i] = 1.0
    return adj


def build_graph(seq: SkeletonSequence, M: int = 4, k: int = 3) -> TrajectoryGraph:
    desc = sequence_descriptors(seq.frames, M)
    adjacency = knn_adjacency(seq.frames.mean(axis=0), k)
    return TrajectoryGraph(desc, adjacency, seq.label)


def to_arrays(seqs: Sequence[SkeletonSequence], M: int = 4, normalized: bool = False):
    """Stack normalized descriptors into ``X`` (``N x J x 3M``) and labels ``y``."""
    if not seqs:
        return np.empty((0, 0, 3 * M)), np.empty(0, dtype=np.int64)
    X = np.stack([sequence_descriptors((s if normalized else normalize(s)).frames, M) for s in seqs])
    y = np.array([s.label for s in seqs], dtype=np.int64)
    return X, y


def stratified_split(y: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test index arrays with the class mix preserved."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


# -- JSON lines -------------------------------------------------------------


def load_jsonl(path) -> list[SkeletonSequence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("record must be a JSON object", lineno)
            missing = {"label", "ref", "frames"} - rec.keys()
            if missing:
                raise ParseError(f"missing field(s) {sorted(missing)}", lineno)
            try:
                frames = np.array(rec["frames"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ParseError("frames must be a T x J x 3 numeric array", lineno) from exc
            ref = rec["ref"]
            if not isinstance(ref, list) or not all(isinstance(i, int) for i in ref):
                raise ValidationError("ref", f"line {lineno}: expected a list of joint indices")
            seq = SkeletonSequence(rec["label"], frames, tuple(ref), rec.get("joint_names"))
            try:
                seq.validate()
            except ValidationError as exc:
                raise ValidationError(exc.field, f"line {lineno}: {exc}") from exc
            out.append(seq)
    return out


def write_jsonl(path, seqs: Iterable[SkeletonSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            rec = {"label": int(s.label), "ref": list(s.ref), "frames": s.frames.tolist()}
            if s.joint_names is not None:
                rec["joint_names"] = list(s.joint_names)
            fh.write(json.dumps(rec) + "\n")


def merge_people(a: SkeletonSequence, b: SkeletonSequence) -> SkeletonSequence:
    """Two interacting skeletons as one ``2J``-joint sequence referenced on the first."""
    T = min(a.T, b.T)
    return SkeletonSequence(a.label, np.concatenate([a.frames[:T], b.frames[:T]], axis=1), a.ref)


# -- synthetic data ---------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs of the synthetic action generator."""

    noise: float = 0.02
    amplitude: float = 0.3
    shared: float = 0.7
    jitter: float = 0.2
    harmonics: int = 2
    max_frequency: float = 3.0


def synth_dataset(
    seed: int,
    classes: int,
    sequences_per_class: int | Sequence[int],
    joints: int,
    frames: int,
    spec: SynthSpec | None = None,
) -> list[SkeletonSequence]:
    """Labelled synthetic skeleton clips with class-specific smooth joint motions.

    Every class owns a mixture of sinusoids per non-reference joint; a share
    ``shared`` of the motion is common to all classes. Each clip gets amplitude
    and phase jitter, its own duration (0.75-1.25 x ``frames``), Gaussian noise
    and a random global rotation, translation and scale. Joints 0-2 form a
    rigid reference triangle.
    """
    spec = spec or SynthSpec()
    if isinstance(sequences_per_class, int):
        sequences_per_class = [sequences_per_class] * classes
    if classes < 1 or joints < 3 or frames < 1 or len(sequences_per_class) != classes:
        raise DomainError("synth_dataset needs classes >= 1, joints >= 3, frames >= 1")
    if min(sequences_per_class) < 1:
        raise DomainError("sequences_per_class must be positive")
    rng = np.random.default_rng(seed)
    H = spec.harmonics

    base = np.zeros((joints, 3))
    base[:3] = [[0.0, 0.5, 0.0], [-0.2, 0.4, 0.0], [0.2, 0.4, 0.0]]
    base[3:] = rng.uniform(-0.5, 0.5, (joints - 3, 3))

    def motion_bank():
        return (
            rng.uniform(0.5, 1.0, (joints, 3, H)) * spec.amplitude,
            rng.uniform(0.5, spec.max_frequency, (joints, 3, H)),
            rng.uniform(0, 2 * math.pi, (joints, 3, H)),
        )

    common = motion_bank()
    protos = [motion_bank() for _ in range(classes)]

    def render(bank, tau, amp_scale, phase_shift):
        amp, freq, phase = bank
        arg = 2 * math.pi * freq[None] * tau[:, None, None, None] + phase[None] + phase_shift
        return (amp[None] * amp_scale * np.sin(arg)).sum(axis=-1)

    out = []
    for label, count in enumerate(sequences_per_class):
        for _ in range(count):
            T = max(1, int(round(frames * rng.uniform(0.75, 1.25))))
            tau = np.linspace(0.0, 1.0, T)
            amp_scale = 1 + spec.jitter * rng.uniform(-1, 1, (joints, 3, H))
            shift = spec.jitter * rng.uniform(-1, 1, (joints, 3, H))
            move = spec.shared * render(common, tau, amp_scale, shift)
            move += (1 - spec.shared) * render(protos[label], tau, amp_scale, shift)
            move[:, :3] = 0.0
            pts = base[None] + move + spec.noise * rng.standard_normal((T, joints, 3))
            pts[:, :3] = base[:3]
            rot = Rotation.random(random_state=rng).as_matrix()
            scale = rng.uniform(0.5, 2.0)
            shift_xyz = rng.uniform(-2, 2, 3)
            pts = scale * pts @ rot.T + shift_xyz
            out.append(SkeletonSequence(label, pts, (0, 1, 2)))
    return out
