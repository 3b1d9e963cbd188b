"""Skeleton sequences: file format, preprocessing, modalities, a synthetic gait generator and score ensembling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, ParseError, SchemaError

FORMAT_VERSION = 1
MODALITIES = ("joint", "bone", "joint_motion", "bone_motion")
MODALITY_SETS = {
    "j": ("joint",),
    "jb": ("joint", "bone"),
    "jbm": ("joint", "bone", "joint_motion", "bone_motion"),
}
SYNTH_CLASSES = ("normal", "reduced_arm_swing", "asymmetric_stride", "tremor")


# ------------------------------------------------------------------ types
@dataclass(frozen=True)
class SkeletonTopology:
    parents: tuple[int, ...]
    name: str = "custom"
    joint_names: tuple[str, ...] = ()
    torso: tuple[int, int] = (0, 0)
    groups: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def validate(self) -> None:
        V = self.num_joints
        if V < 1:
            raise SchemaError("topology has no joints")
        for j, p in enumerate(self.parents):
            if not 0 <= p < V:
                raise SchemaError(f"joint {j} has parent {p} outside [0, {V})")
        for j in range(V):
            seen, k = set(), j
            while self.parents[k] != k:
                if k in seen:
                    raise SchemaError(f"parent chain from joint {j} contains a cycle")
                seen.add(k)
                k = self.parents[k]
        for j in self.torso:
            if not 0 <= j < V:
                raise SchemaError(f"torso joint {j} outside [0, {V})")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_joints": self.num_joints,
            "parents": list(self.parents),
            "joint_names": list(self.joint_names),
            "torso": list(self.torso),
            "groups": {k: list(v) for k, v in self.groups.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> SkeletonTopology:
        try:
            topo = cls(
                parents=tuple(int(p) for p in d["parents"]),
                name=str(d.get("name", "custom")),
                joint_names=tuple(d.get("joint_names", ())),
                torso=tuple(d.get("torso", (0, 0))),
                groups={k: tuple(v) for k, v in d.get("groups", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed topology: {exc}") from exc
        if "num_joints" in d and int(d["num_joints"]) != topo.num_joints:
            raise SchemaError(f"topology declares {d['num_joints']} joints but lists {topo.num_joints} parents")
        topo.validate()
        return topo


def load_topology(name: str = "ntu25") -> SkeletonTopology:
    try:
        text = resources.files("skelmamba.configs").joinpath(f"topology_{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no bundled topology named {name!r}") from exc
    return SkeletonTopology.from_dict(json.loads(text))


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # (T, V, 3)
    label: int
    id: int | str = 0
    subject: int | None = None

    def validate(self, num_classes: int | None = None, num_joints: int | None = None) -> None:
        f = self.frames
        if f.ndim != 3 or f.shape[-1] != 3:
            raise SchemaError(f"sample {self.id}: frames must be (T, V, 3), got {f.shape}")
        if f.shape[0] < 2:
            raise SchemaError(f"sample {self.id}: needs at least 2 frames, got {f.shape[0]}")
        if num_joints is not None and f.shape[1] != num_joints:
            raise SchemaError(f"sample {self.id}: {f.shape[1]} joints, topology has {num_joints}")
        if not np.isfinite(f).all():
            raise SchemaError(f"sample {self.id}: non-finite coordinates")
        if self.label < 0 or (num_classes is not None and self.label >= num_classes):
            raise SchemaError(f"sample {self.id}: label {self.label} outside [0, {num_classes})")


@dataclass
class Dataset:
    topology: SkeletonTopology
    classes: list[str]
    samples: list[SkeletonSequence]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def validate(self) -> None:
        self.topology.validate()
        for s in self.samples:
            s.validate(self.num_classes, self.topology.num_joints)

    def subset(self, idx: Sequence[int]) -> Dataset:
        return Dataset(self.topology, list(self.classes), [self.samples[i] for i in idx])

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "topology": self.topology.to_dict(),
            "classes": list(self.classes),
            "samples": [
                {
                    "id": s.id,
                    "label": int(s.label),
                    **({"subject": s.subject} if s.subject is not None else {}),
                    "frames": s.frames.tolist(),
                }
                for s in self.samples
            ],
        }


# ------------------------------------------------------------------ file io
def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the JSON dataset. Python's float repr round-trips every double exactly."""
    Path(path).write_text(json.dumps(dataset.to_dict(), separators=(",", ":")) + "\n")


def dataset_from_dict(obj) -> Dataset:
    if not isinstance(obj, dict):
        raise SchemaError("dataset document must be a JSON object")
    if obj.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported dataset version {obj.get('version')!r}")
    for key in ("topology", "classes", "samples"):
        if key not in obj:
            raise SchemaError(f"dataset lacks the {key!r} field")
    topo = SkeletonTopology.from_dict(obj["topology"])
    classes = [str(c) for c in obj["classes"]]
    samples = []
    for k, entry in enumerate(obj["samples"]):
        try:
            frames = np.asarray(entry["frames"], dtype=np.float64)
            seq = SkeletonSequence(frames, int(entry["label"]), entry.get("id", k), entry.get("subject"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"sample #{k}: {exc}") from exc
        seq.validate(len(classes), topo.num_joints)
        samples.append(seq)
    return Dataset(topo, classes, samples)


def load_dataset(path: str | Path) -> Dataset:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno} (byte {exc.pos}): {exc.msg}") from exc
    return dataset_from_dict(obj)


# ------------------------------------------------------------ preprocessing
def resample(
    frames: np.ndarray,
    T_target: int = 64,
    train: bool = False,
    rng: np.random.Generator | None = None,
    min_crop: float = 0.8,
) -> np.ndarray:
    """Linear temporal interpolation to exactly ``T_target`` frames.

    Eval mode samples the whole sequence uniformly, keeping both endpoints.
    Train mode first picks a random window covering at least ``min_crop`` of it.
    """
    frames = np.asarray(frames)
    T = frames.shape[0]
    if T < 2:
        raise DomainError(f"resampling needs at least 2 frames, got {T}")
    if T_target < 1:
        raise DomainError(f"T_target must be positive, got {T_target}")
    start, stop = 0.0, float(T - 1)
    if train:
        if rng is None:
            raise ConfigError("train-mode resampling needs a random generator")
        span = (T - 1) * rng.uniform(min_crop, 1.0)
        start = rng.uniform(0.0, (T - 1) - span)
        stop = start + span
    if not train and T == T_target:
        return frames.copy()
    pos = np.linspace(start, stop, T_target)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, T - 1)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None, None]
    return (1.0 - w) * frames[lo] + w * frames[hi]


def normalize(frames: np.ndarray, topology: SkeletonTopology, root: int = 0) -> np.ndarray:
    """Center on the first frame's root joint and scale by the median torso length."""
    out = frames - frames[0, root]
    a, b = topology.torso
    torso = np.median(np.linalg.norm(frames[:, a] - frames[:, b], axis=-1))
    if torso > 1e-9:
        out = out / torso
    return out


def derive_bones(frames: np.ndarray, topology: SkeletonTopology) -> np.ndarray:
    parents = np.asarray(topology.parents)
    if frames.shape[-2] != len(parents):
        raise DimensionError(f"frames have {frames.shape[-2]} joints, topology {len(parents)}")
    return frames - frames[..., parents, :]


def derive_motion(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
    return out


def modality_view(frames: np.ndarray, topology: SkeletonTopology, modality: str) -> np.ndarray:
    if modality == "joint":
        return frames
    if modality == "bone":
        return derive_bones(frames, topology)
    if modality == "joint_motion":
        return derive_motion(frames)
    if modality == "bone_motion":
        return derive_motion(derive_bones(frames, topology))
    raise ConfigError(f"unknown modality {modality!r}; expected one of {MODALITIES}")


def sample_rng(seed: int, sample_id: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, sample id, stream)."""
    key = np.array([np.uint64(seed) ^ (np.uint64(stream) << np.uint64(48)), np.uint64(sample_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def prepare_arrays(
    dataset: Dataset,
    T: int,
    modality: str = "joint",
    train: bool = False,
    seed: int = 0,
    epoch: int = 0,
    dtype=np.float32,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalize, resample and convert every sample: returns ``X[N, T, V, 3]`` and labels."""
    X = np.empty((len(dataset), T, dataset.topology.num_joints, 3), dtype=dtype)
    for i, s in enumerate(dataset.samples):
        rng = sample_rng(seed, _numeric_id(s.id, i), stream=1 + epoch) if train else None
        f = resample(normalize(s.frames, dataset.topology), T, train=train, rng=rng)
        X[i] = modality_view(f, dataset.topology, modality)
    return X, dataset.labels()


def _numeric_id(sample_id, fallback: int) -> int:
    if isinstance(sample_id, (int, np.integer)):
        return int(sample_id)
    try:
        return int(sample_id)
    except (TypeError, ValueError):
        return fallback


# ------------------------------------------------------ synthetic generator
_ARM_CHAINS = {"left": (4, 5, 6, 7, 21, 22), "right": (8, 9, 10, 11, 23, 24)}
_TREMOR_JOINTS = (3, 5, 6, 7, 9, 10, 11, 21, 22, 23, 24)


def _rot(theta):
    """Sagittal rotation of the downward vector (0, -1, 0); returns unit direction(s)."""
    theta = np.asarray(theta)
    return np.stack([np.zeros_like(theta), -np.cos(theta), np.sin(theta)], axis=-1)


def _walker(T: int, rng: np.random.Generator, params: dict) -> np.ndarray:
    """Forward kinematics of a figure walking in place, shape ``(T, 25, 3)``; x lateral, y up, z forward."""
    s = params["scale"]
    t = np.arange(T)
    phi = 2 * np.pi * params["cycles"] * t / T + params["phase0"]
    X = np.zeros((T, 25, 3))
    pelvis = np.stack([np.zeros(T), 1.0 * s + 0.02 * s * np.cos(2 * phi), np.zeros(T)], axis=-1)
    X[:, 0] = pelvis
    up = np.array([0.0, 1.0, 0.0])
    lean = np.array([0.0, 0.0, 0.02])
    X[:, 1] = X[:, 0] + s * (0.25 * up + lean)
    X[:, 20] = X[:, 1] + s * (0.25 * up + lean)
    X[:, 2] = X[:, 20] + s * 0.08 * up
    X[:, 3] = X[:, 2] + s * 0.12 * up

    for side, sign, leg_off in (("left", -1.0, 0.0), ("right", 1.0, np.pi)):
        hip_amp = params[f"hip_{side}"]
        knee_amp = params[f"knee_{side}"]
        ph = phi + leg_off + params[f"leg_shift_{side}"]
        hip_angle = hip_amp * np.sin(ph)
        knee = knee_amp * 0.5 * (1 - np.cos(ph + 0.6))
        hip_j, knee_j, ankle_j, foot_j = (12, 13, 14, 15) if side == "left" else (16, 17, 18, 19)
        X[:, hip_j] = X[:, 0] + s * np.array([sign * 0.1, -0.05, 0.0])
        X[:, knee_j] = X[:, hip_j] + s * 0.45 * _rot(hip_angle)
        X[:, ankle_j] = X[:, knee_j] + s * 0.43 * _rot(hip_angle - knee)
        X[:, foot_j] = X[:, ankle_j] + s * np.array([0.0, -0.05, 0.12])

        arm_amp = params[f"arm_{side}"]
        swing = arm_amp * np.sin(phi + leg_off + np.pi)  # opposite to the same-side leg
        elbow = params["elbow"] + 0.3 * arm_amp * (1 + np.sin(phi + leg_off + np.pi)) / 2
        sh, el, wr, ha, tip, th = _ARM_CHAINS[side]
        X[:, sh] = X[:, 20] + s * np.array([sign * 0.18, -0.02, 0.0])
        X[:, el] = X[:, sh] + s * 0.28 * _rot(swing)
        X[:, wr] = X[:, el] + s * 0.26 * _rot(swing + elbow)
        X[:, ha] = X[:, wr] + s * 0.08 * _rot(swing + elbow)
        X[:, tip] = X[:, ha] + s * 0.05 * _rot(swing + elbow)
        X[:, th] = X[:, ha] + s * np.array([-sign * 0.03, -0.03, 0.02])

    if params.get("tremor_amp", 0.0) > 0:
        amp, period = params["tremor_amp"], params["tremor_period"]
        direction = params["tremor_dir"]
        wave = np.sin(2 * np.pi * t / period + params["tremor_phase"])
        for j in _TREMOR_JOINTS:
            X[:, j] += amp * params["tremor_gain"][j] * wave[:, None] * direction

    yaw = params["yaw"]
    c, sn = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, 0, sn], [0, 1, 0], [-sn, 0, c]])
    X = X @ R.T
    return X + rng.normal(0.0, params["noise"], X.shape)


def synth_params(label: int, rng: np.random.Generator) -> dict:
    deg = np.pi / 180
    arm = rng.uniform(20, 32) * deg
    hip = rng.uniform(20, 28) * deg
    knee = rng.uniform(45, 60) * deg
    p = {
        "scale": rng.uniform(0.9, 1.1),
        "cycles": rng.uniform(1.5, 2.5),
        "phase0": rng.uniform(0, 2 * np.pi),
        "yaw": rng.uniform(-20, 20) * deg,
        "noise": 0.005,
        "elbow": rng.uniform(10, 20) * deg,
        "arm_left": arm,
        "arm_right": arm,
        "hip_left": hip,
        "hip_right": hip,
        "knee_left": knee,
        "knee_right": knee,
        "leg_shift_left": 0.0,
        "leg_shift_right": 0.0,
    }
    name = SYNTH_CLASSES[label]
    if name == "reduced_arm_swing":
        factor = rng.uniform(0.1, 0.35)
        p["arm_left"] = p["arm_right"] = arm * factor
    elif name == "asymmetric_stride":
        side = "left" if rng.uniform() < 0.5 else "right"
        p[f"hip_{side}"] = hip * rng.uniform(0.55, 0.7)
        p[f"knee_{side}"] = knee * 0.6
        p[f"leg_shift_{side}"] = rng.uniform(0.3, 0.6)
    elif name == "tremor":
        d = rng.normal(size=3)
        p["tremor_amp"] = rng.uniform(0.08, 0.12)
        p["tremor_period"] = rng.uniform(10, 14)
        p["tremor_phase"] = rng.uniform(0, 2 * np.pi)
        p["tremor_dir"] = d / np.linalg.norm(d)
        gain = np.zeros(25)
        gain[[5, 9]] = 0.5
        gain[[6, 10]] = 0.8
        gain[[7, 11, 21, 22, 23, 24]] = 1.0
        gain[3] = 0.6
        p["tremor_gain"] = gain
    return p


def synth_generate(
    num_classes: int = 4,
    per_class: int = 50,
    seed: int = 7,
    T: int = 64,
    start_id: int = 0,
) -> Dataset:
    """Deterministic synthetic gait dataset; sample ``k`` gets label ``k % num_classes``."""
    if not 1 <= num_classes <= len(SYNTH_CLASSES):
        raise ConfigError(f"synthetic generator supports 1..{len(SYNTH_CLASSES)} classes, got {num_classes}")
    if per_class < 1 or T < 2:
        raise ConfigError(f"need per_class >= 1 and T >= 2, got {per_class}, {T}")
    topo = load_topology("ntu25")
    samples = []
    for k in range(num_classes * per_class):
        sid = start_id + k
        label = k % num_classes
        rng = sample_rng(seed, sid)
        frames = _walker(T, rng, synth_params(label, rng))
        samples.append(SkeletonSequence(frames, label, sid))
    return Dataset(topo, list(SYNTH_CLASSES[:num_classes]), samples)


def arm_variance(frames: np.ndarray, topology: SkeletonTopology | None = None) -> float:
    """Mean temporal variance of root-relative arm-joint positions."""
    topology = topology or load_topology("ntu25")
    arms = list(topology.groups["arms"])
    rel = frames[:, arms] - frames[:, :1]
    return float(rel.var(axis=0).sum(axis=-1).mean())


# ------------------------------------------------------------------ scores
def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble(scores: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-model probability rows."""
    if not scores:
        raise DimensionError("ensemble needs at least one score matrix")
    arrs = [np.asarray(s, dtype=np.float64) for s in scores]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise DimensionError(f"score shapes differ: {shape} vs {a.shape}")
    return np.mean(arrs, axis=0)
