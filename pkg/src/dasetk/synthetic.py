"""Deterministic synthetic volumes whose classes differ only in slice order.

Each volume is a Gaussian blob whose radius follows a class-specific
temporal profile: class 0 grows linearly across the stack, class 1 shrinks,
class 2 pulses (grows to the middle slice, then shrinks). The blob centre
is jittered per volume *independently of class*, so at zero noise a class-1
volume is exactly the slice-reversal of the class-0 volume with the same
index. Per-slice appearance statistics overlap heavily across classes; the
label lives in the ordering, which is what an order-sensitive encoder can
see and an order-invariant pooling cannot.

Generation is a pure function of (spec, class, index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, normalize_volume


@dataclass(frozen=True)
class SynthSpec:
    """Dimensions, noise level, and seed of the synthetic dataset."""

    class_count: int = 3
    volumes_per_class: int = 60
    t_len: int = 16
    height: int = 32
    width: int = 32
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.t_len, self.height, self.width) < 4:
            raise ValueError("all dimensions must be at least 4")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 1 <= self.class_count <= 3:
            raise ValueError("between 1 and 3 classes are defined")
        if self.volumes_per_class < 1:
            raise ValueError("need at least one volume per class")

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "volumes_per_class": self.volumes_per_class,
            "t_len": self.t_len,
            "height": self.height,
            "width": self.width,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _radius_profile(class_id: int, t_len: int) -> np.ndarray:
    base = np.linspace(0.0, 1.0, t_len)
    if class_id == 0:  # grows
        u = base
    elif class_id == 1:  # shrinks: exact mirror of class 0
        u = base[::-1]
    else:  # pulses: up then down
        u = 1.0 - np.abs(2.0 * base - 1.0)
    return u


def gen_synthetic_volume(spec: SynthSpec, class_id: int, index: int) -> Volume:
    """One volume, normalised to [0, 1]; identical inputs give identical output."""
    if not 0 <= class_id < spec.class_count:
        raise ValueError(f"class_id {class_id} outside [0, {spec.class_count})")
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")

    scale = min(spec.height, spec.width)
    r_lo, r_hi = 0.10 * scale, 0.30 * scale

    geom = np.random.default_rng([spec.seed, index])  # class-independent geometry
    cy = spec.height / 2.0 + geom.uniform(-0.1, 0.1) * spec.height
    cx = spec.width / 2.0 + geom.uniform(-0.1, 0.1) * spec.width

    yy = np.arange(spec.height, dtype=np.float64)[:, None]
    xx = np.arange(spec.width, dtype=np.float64)[None, :]
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2

    radii = r_lo + (r_hi - r_lo) * _radius_profile(class_id, spec.t_len)
    vol = np.stack([np.exp(-dist2 / (2.0 * r * r)) for r in radii])

    if spec.noise > 0:
        noise_rng = np.random.default_rng([spec.seed, class_id, index, 1])
        vol = vol + spec.noise * noise_rng.standard_normal(vol.shape)

    return normalize_volume(Volume(vol.astype(np.float32)))


def gen_dataset(spec: SynthSpec) -> tuple[list[Volume], np.ndarray]:
    """All volumes, class-major order, with their integer labels."""
    volumes, labels = [], []
    for class_id in range(spec.class_count):
        for index in range(spec.volumes_per_class):
            volumes.append(gen_synthetic_volume(spec, class_id, index))
            labels.append(class_id)
    return volumes, np.asarray(labels, dtype=np.int64)
