"""Deterministic two-modality phantom generator.

Each subject is an ellipsoidal head with four tissue parcels, a brainstem,
a cochlea pair, and a spherical tumor whose radius drives the grade. The
same anatomy is rendered twice with different intensity transfer functions:

  modality A: tumor bright, cochlea moderately bright
  modality B: tumor dark, fluid (cochlea) bright

so the two renderings share geometry and masks and differ only in contrast
and noise. Everything is a pure function of (seed, subject index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import LabeledVolume, Modality, Volume

# per-parcel tissue intensities, index 0 unused (background)
INTENSITY_A = {"background": 0.02, "parcels": (0.40, 0.46, 0.52, 0.58), "stem": 0.48, "cochlea": 0.75, "tumor": 0.92}
INTENSITY_B = {"background": 0.02, "parcels": (0.50, 0.44, 0.38, 0.56), "stem": 0.42, "cochlea": 0.88, "tumor": 0.15}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (24, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.015
    tumor_radius_range: tuple[float, float] = (2.0, 7.0)
    # radius cut points between grades 1|2, 2|3, 3|4
    grade_thresholds: tuple[float, float, float] = (3.0, 4.5, 6.0)
    contact_bump: bool = True


@dataclass(frozen=True)
class PhantomSubject:
    subject_id: str
    a: LabeledVolume
    b: LabeledVolume
    tumor_radius: float
    stem_contact: bool

    @property
    def grade(self) -> int:
        return self.a.koos_grade


def _ellipsoid(grids, center, semiaxes) -> np.ndarray:
    zz, rr, cc = grids
    d = ((zz - center[0]) / semiaxes[0]) ** 2
    d += ((rr - center[1]) / semiaxes[1]) ** 2
    d += ((cc - center[2]) / semiaxes[2]) ** 2
    return d <= 1.0


def koos_grade_for(spec: PhantomSpec, radius: float, contact: bool) -> int:
    grade = 1 + sum(radius >= t for t in spec.grade_thresholds)
    if spec.contact_bump and contact:
        grade = min(grade + 1, 4)
    return grade


def tumor_radius_for_grade(spec: PhantomSpec, grade: int, rng: np.random.Generator) -> float:
    """Sample a radius whose threshold grade (before contact bump) is `grade`."""
    lo, hi = spec.tumor_radius_range
    cuts = (lo, *spec.grade_thresholds, hi)
    g_lo, g_hi = cuts[grade - 1], cuts[grade]
    return float(rng.uniform(g_lo, min(g_hi, hi)))


def generate_subject(spec: PhantomSpec, index: int, subject_id: str | None = None,
                     grade: int | None = None) -> PhantomSubject:
    """Render one subject in both modalities. Deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    subject_id = subject_id or f"s{index:03d}"
    S, R, C = spec.shape
    grids = np.indices(spec.shape).astype(np.float64)
    zz, rr, cc = grids

    center = np.array([S / 2, R / 2, C / 2]) + rng.uniform(-1.0, 1.0, 3)
    head_ax = np.array([0.42 * S, 0.40 * R, 0.36 * C]) * rng.uniform(0.92, 1.08, 3)
    head = _ellipsoid(grids, center, head_ax)

    # four parcels: quadrants of the head in the row/column plane
    gif = np.zeros(spec.shape, dtype=np.uint16)
    quadrant = (rr >= center[1]).astype(np.uint16) * 2 + (cc >= center[2]).astype(np.uint16)
    gif[head] = quadrant[head] + 1

    stem_r = 0.055 * (R + C) / 2
    stem = ((rr - center[1]) ** 2 + (cc - center[2]) ** 2 <= stem_r**2) & head

    side = 1 if rng.random() < 0.5 else -1
    coch_r = 0.05 * (R + C) / 2 + rng.uniform(-0.2, 0.2)
    coch_off = np.array([0.0, 0.10 * R, side * 0.26 * C]) + rng.uniform(-0.5, 0.5, 3)
    coch1 = _ellipsoid(grids, center + coch_off, (coch_r, coch_r, coch_r))
    coch_off2 = coch_off * np.array([1.0, 1.0, -1.0])
    coch2 = _ellipsoid(grids, center + coch_off2, (coch_r, coch_r, coch_r))
    cochlea = coch1 | coch2

    if grade is not None:
        radius = tumor_radius_for_grade(spec, grade, rng)
    else:
        radius = float(rng.uniform(*spec.tumor_radius_range))
    # tumor sits between stem and the chosen cochlea; the stem is placed far
    # enough that only the largest tumors can touch it
    gap = stem_r + 8.0
    tumor_center = center + np.array([0.0, 0.10 * R, side * gap]) + rng.uniform(-0.4, 0.4, 3)
    tumor = _ellipsoid(grids, tumor_center, (radius, radius, radius))
    contact = bool(np.any(tumor & stem))

    vs = np.zeros(spec.shape, dtype=np.uint8)
    vs[tumor] = 1
    vs[cochlea] = 2

    final_grade = koos_grade_for(spec, radius, contact)

    def render(palette, noise_seed):
        img = np.full(spec.shape, palette["background"], dtype=np.float64)
        for k, val in enumerate(palette["parcels"], start=1):
            img[gif == k] = val
        img[stem] = palette["stem"]
        img[tumor] = palette["tumor"]
        img[cochlea] = palette["cochlea"]
        noise_rng = np.random.default_rng([spec.seed, index, noise_seed])
        img += noise_rng.normal(0.0, spec.noise_sigma, spec.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    vol_a = Volume(render(INTENSITY_A, 1), spec.spacing, modality=Modality.T1)
    vol_b = Volume(render(INTENSITY_B, 2), spec.spacing, modality=Modality.T2)
    lv_a = LabeledVolume(vol_a, vs, gif, final_grade, subject_id)
    lv_b = LabeledVolume(vol_b, vs, gif, final_grade, subject_id)
    return PhantomSubject(subject_id, lv_a, lv_b, radius, contact)


def generate_cohort(spec: PhantomSpec, n: int, start: int = 0, prefix: str = "s",
                    balance_grades: bool = False) -> list[PhantomSubject]:
    """n subjects with both modality renderings.

    With balance_grades, grades cycle 1..4 (with one extra of grade 2 when n
    is not a multiple of 4 stays implicit in the cycling order) so toy
    classifier runs see every grade.
    """
    subjects = []
    for i in range(n):
        idx = start + i
        grade = (i % 4) + 1 if balance_grades else None
        subjects.append(generate_subject(spec, idx, f"{prefix}{idx:03d}", grade=grade))
    return subjects
