"""Synthetic phantoms and reference scorers for end-to-end pipeline tests.

Phantoms are tubular "vessels" (random smooth walks painted as tubes)
with spherical lesions attached to the vessel paths, on a uniform
background plus Gaussian noise.  The oracle detector and the reference
classifier stand in for the neural networks of a real deployment: the
detector reports ground truth with controllable misses, jitter, and
injected false positives; the classifier scores a patch by how sphere-like
its bright center is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .anchors import BoundingBox, Lesion
from .fpr import FprPatchSet
from .postproc import CandidateDetection, Stage
from .volume import Volume

SIZE_CLASS_BINS = ((3.0, "2.5-3mm"), (5.0, "3-5mm"), (10.0, "5-10mm"))
SIZE_CLASS_TOP = ">10mm"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_vessels: int = 4
    vessel_radius_range: tuple[float, float] = (2.0, 4.0)
    n_aneurysms: int = 3
    aneurysm_diameter_range: tuple[float, float] = (2.5, 20.0)
    vessel_hu: float = 300.0
    aneurysm_hu: float = 400.0
    background_hu: float = 40.0
    noise_sigma: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.n_vessels < 0 or self.n_aneurysms < 0:
            raise ValueError("counts must be >= 0")
        for name, rng_ in (
            ("vessel_radius_range", self.vessel_radius_range),
            ("aneurysm_diameter_range", self.aneurysm_diameter_range),
        ):
            if rng_[0] <= 0 or rng_[1] < rng_[0]:
                raise ValueError(f"{name} must be positive and ordered, got {rng_}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_aneurysms > 0 and self.n_vessels == 0:
            raise ValueError("aneurysms attach to vessels; need n_vessels >= 1")


@dataclass(frozen=True)
class OracleDetectorSpec:
    """Controls for the ground-truth-backed stand-in detector."""

    hit_prob: float = 1.0
    center_jitter_sigma: float = 0.0
    diameter_jitter_ratio: float = 0.0
    fp_per_volume: float = 0.0
    fp_prob_range: tuple[float, float] = (0.2, 0.8)
    tp_prob_range: tuple[float, float] = (1.0, 1.0)
    fp_diameter_range: tuple[float, float] = (2.5, 10.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hit_prob <= 1.0:
            raise ValueError(f"hit_prob must be in [0, 1], got {self.hit_prob}")
        for name, rng_ in (
            ("fp_prob_range", self.fp_prob_range),
            ("tp_prob_range", self.tp_prob_range),
        ):
            if not 0.0 <= rng_[0] <= rng_[1] <= 1.0:
                raise ValueError(f"{name} must be ordered within [0, 1], got {rng_}")
        if self.center_jitter_sigma < 0 or self.diameter_jitter_ratio < 0:
            raise ValueError("jitter magnitudes must be >= 0")
        if self.fp_per_volume < 0:
            raise ValueError("fp_per_volume must be >= 0")


def size_class(diameter_vox: float, spacing: Sequence[float]) -> str:
    """Size-class label from the physical diameter (mean spacing across axes)."""
    mm = diameter_vox * float(np.mean(spacing))
    for upper, label in SIZE_CLASS_BINS:
        if mm < upper:
            return label
    return SIZE_CLASS_TOP


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(0.0, 1.0, 3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def _vessel_path(
    rng: np.random.Generator, dims: Sequence[int], margin: float
) -> np.ndarray:
    """Smooth random walk through the volume, reflected at the margins."""
    lo = np.full(3, margin)
    hi = np.asarray(dims, dtype=float) - 1.0 - margin
    pos = rng.uniform(lo, hi)
    direction = _random_unit(rng)
    n_steps = int(2.0 * max(dims))
    points = np.empty((n_steps, 3))
    for i in range(n_steps):
        points[i] = pos
        direction = direction + 0.35 * rng.normal(0.0, 1.0, 3)
        direction /= np.linalg.norm(direction)
        pos = pos + direction
        for ax in range(3):
            if pos[ax] < lo[ax]:
                pos[ax] = 2 * lo[ax] - pos[ax]
                direction[ax] = abs(direction[ax])
            elif pos[ax] > hi[ax]:
                pos[ax] = 2 * hi[ax] - pos[ax]
                direction[ax] = -abs(direction[ax])
    return points


def _paint_ball(vol: np.ndarray, center: Sequence[float], radius: float, value: float):
    los = [max(0, int(math.floor(c - radius))) for c in center]
    his = [min(d, int(math.ceil(c + radius)) + 1) for c, d in zip(center, vol.shape)]
    if any(h <= l for l, h in zip(los, his)):
        return
    grids = np.ogrid[los[0]:his[0], los[1]:his[1], los[2]:his[2]]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    region = vol[los[0]:his[0], los[1]:his[1], los[2]:his[2]]
    region[d2 <= radius * radius] = value


def _separated(a: BoundingBox, b: BoundingBox, margin: float) -> bool:
    # disjoint with at least `margin` clearance along some axis
    return any(
        abs(ca - cb) - (a.diameter + b.diameter) / 2.0 >= margin
        for ca, cb in zip(a.center, b.center)
    )


def generate_phantom(spec: PhantomSpec, volume_id: str = "phantom"):
    """Build a phantom volume and its ground-truth lesion list.

    Deterministic given ``spec.seed``.  Lesion annotations carry a
    size-class label (from the physical diameter) and the index of the
    vessel they attach to.  Raises if the requested lesions cannot be
    placed without overlap after bounded retries.
    """
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    vol = np.full(dims, spec.background_hu, dtype=np.float64)

    vessels = []
    for _ in range(spec.n_vessels):
        radius = rng.uniform(*spec.vessel_radius_range)
        path = _vessel_path(rng, dims, margin=2.0 + radius)
        vessels.append((path, radius))
    for path, radius in vessels:
        for point in path:
            _paint_ball(vol, point, radius, spec.vessel_hu)

    lesions: list[Lesion] = []
    for _ in range(spec.n_aneurysms):
        for _attempt in range(200):
            v_idx = int(rng.integers(len(vessels)))
            path, radius = vessels[v_idx]
            point = path[int(rng.integers(len(path)))]
            diameter = float(rng.uniform(*spec.aneurysm_diameter_range))
            center = point + (radius + 0.45 * diameter) * _random_unit(rng)
            box = BoundingBox(tuple(center), diameter)
            if any(l < 0.5 for l in box.lo) or any(
                h > d - 1.5 for h, d in zip(box.hi, dims)
            ):
                continue
            if all(_separated(box, l.box, 3.0) for l in lesions):
                lesions.append(
                    Lesion(
                        box,
                        {
                            "size_class": size_class(diameter, spec.spacing),
                            "location": f"vessel-{v_idx}",
                        },
                    )
                )
                break
        else:
            raise ValueError(
                f"could not place {spec.n_aneurysms} non-overlapping lesions "
                f"in dims {dims} after 200 retries"
            )
    for lesion in lesions:
        _paint_ball(vol, lesion.box.center, lesion.box.diameter / 2.0, spec.aneurysm_hu)

    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0.0, spec.noise_sigma, dims)
    values = np.clip(np.rint(vol), -32768, 32767).astype(np.int16)
    volume = Volume(values, spec.spacing, volume_id, cranial_axis="+z")
    return volume, lesions


def oracle_detect(
    truth: Sequence[BoundingBox],
    spec: OracleDetectorSpec,
    dims: tuple[int, int, int],
) -> list[CandidateDetection]:
    """Ground-truth-backed detector with controllable errors.

    Each lesion is independently reported with probability ``hit_prob``,
    its box jittered per ``spec``; Poisson-many false candidates are placed
    uniformly, kept clear of every true lesion.  Per-lesion substreams are
    derived from (seed, 0, lesion index) and the false-positive stream from
    (seed, 1), so results are independent of list-external state.
    """
    cands: list[CandidateDetection] = []
    for i, box in enumerate(_as_boxes(truth)):
        r = np.random.default_rng([spec.seed, 0, i])
        if r.random() >= spec.hit_prob:
            continue
        center = np.asarray(box.center, dtype=float)
        if spec.center_jitter_sigma > 0:
            center = center + r.normal(0.0, spec.center_jitter_sigma, 3)
        diameter = box.diameter
        if spec.diameter_jitter_ratio > 0:
            diameter *= 1.0 + spec.diameter_jitter_ratio * r.uniform(-1.0, 1.0)
        prob = float(r.uniform(*spec.tp_prob_range))
        cands.append(
            CandidateDetection(
                BoundingBox(tuple(center), max(diameter, 0.1)), prob, Stage.DETECTOR
            )
        )

    r = np.random.default_rng([spec.seed, 1])
    boxes = _as_boxes(truth)
    for _ in range(int(r.poisson(spec.fp_per_volume))):
        for _attempt in range(100):
            center = tuple(r.uniform(2.0, d - 3.0) for d in dims)
            diameter = float(r.uniform(*spec.fp_diameter_range))
            fp_box = BoundingBox(center, diameter)
            if all(_separated(fp_box, b, 4.0) for b in boxes):
                prob = float(r.uniform(*spec.fp_prob_range))
                cands.append(CandidateDetection(fp_box, prob, Stage.DETECTOR))
                break
    return cands


def _as_boxes(lesions: Sequence) -> list[BoundingBox]:
    return [l.box if isinstance(l, Lesion) else l for l in lesions]


def reference_classifier(
    patch_set: FprPatchSet, threshold: float = 0.15
) -> tuple[float, float, float]:
    """Analytic patch scorer: bright-fraction inside a central sphere minus
    bright-fraction in the surrounding shell, squashed to [0, 1].

    On phantom data this scores lesion-centered patches above vessel or
    background patches: a sphere fills the patch center while a tube
    continues into the shell.
    """
    scores = []
    for patch in patch_set.patches:
        arr = patch.values
        shape = arr.shape
        radius = min(shape) / 4.0
        grids = np.ogrid[0:shape[0], 0:shape[1], 0:shape[2]]
        d2 = sum((g - (s - 1) / 2.0) ** 2 for g, s in zip(grids, shape))
        inner = d2 <= radius * radius
        shell = (d2 > radius * radius) & (d2 <= 4.0 * radius * radius)
        bright = arr > threshold
        frac_in = float(bright[inner].mean()) if inner.any() else 0.0
        frac_shell = float(bright[shell].mean()) if shell.any() else 0.0
        scores.append(float(np.clip(0.5 + 0.5 * (frac_in - frac_shell), 0.0, 1.0)))
    return tuple(scores)


def perfect_classifier(lesions: Sequence) -> Callable[[FprPatchSet], tuple[float, float, float]]:
    """Oracle rescorer: 1.0 for candidates centered inside a lesion, else 0."""
    boxes = _as_boxes(lesions)

    def classify(patch_set: FprPatchSet) -> tuple[float, float, float]:
        hit = any(b.contains(patch_set.candidate.box.center) for b in boxes)
        value = 1.0 if hit else 0.0
        return (value, value, value)

    return classify
