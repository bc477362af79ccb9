"""Preprocessing: histogram matching, affine registration to an atlas, and
fixed-region cropping.

Registration conventions:
  * AffineTransform maps atlas (fixed) physical coordinates to moving
    physical coordinates, x_mov = matrix @ x_fix + translation, so warping
    pulls moving intensities onto the atlas grid.
  * MI is computed on rank-binned intensities (equal-mass bins), which makes
    it invariant under strictly monotone intensity remapping. NCC is global
    normalized cross-correlation, invariant under positive-gain affine
    intensity remapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, optimize

from .errors import PreprocessError, RegistrationError, ValidationError
from .volume import LabeledVolume, Modality, Volume, resample, resample_grid


@dataclass(frozen=True)
class AffineTransform:
    """Physical-space affine map x_mov = matrix @ x_fix + translation."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(m)) <= 1e-8:
            raise ValidationError(f"affine matrix is singular (det={np.linalg.det(m):.3g})")
        m.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply_to_points(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.matrix.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """self ∘ inner: first apply inner, then self."""
        return AffineTransform(self.matrix @ inner.matrix, self.matrix @ inner.translation + self.translation)


@dataclass(frozen=True)
class CropRegion:
    start: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        if len(self.start) != 3 or len(self.size) != 3:
            raise ValidationError("crop start/size must be 3-vectors")
        if any(s < 1 for s in self.size):
            raise ValidationError(f"crop size must be positive, got {self.size}")
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))


# ---------------------------------------------------------------------------
# Histogram matching
# ---------------------------------------------------------------------------


def histogram_match(moving: Volume, reference: Volume, n_quantiles: int = 256) -> Volume:
    """Map moving intensities so their quantiles match the reference's.

    Classic histogram specification: both quantile curves are sampled at
    n_quantiles rank points and each voxel is mapped through the piecewise
    linear moving-quantile -> reference-quantile correspondence. The mapping
    is monotone non-decreasing, and matching a volume to itself is exact.
    """
    if n_quantiles < 2:
        raise ValidationError(f"n_quantiles must be >= 2, got {n_quantiles}")
    ref = reference.data.ravel().astype(np.float64)
    if ref.max() == ref.min():
        raise ValidationError("histogram matching against a constant reference is undefined")
    mov = moving.data.ravel().astype(np.float64)

    grid = np.linspace(0.0, 1.0, n_quantiles)
    ref_q = np.quantile(ref, grid)
    if mov.max() == mov.min():
        # every voxel sits at mid-rank 0.5: map to the reference median
        out = np.full_like(mov, np.quantile(ref, 0.5))
    else:
        mov_q = np.quantile(mov, grid)
        out = np.interp(mov, mov_q, ref_q)
    return moving.with_data(out.reshape(moving.shape).astype(np.float32))


# ---------------------------------------------------------------------------
# Similarity measures
# ---------------------------------------------------------------------------


def _rank_bins(x: np.ndarray, bins: int) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    out = np.empty(x.size, dtype=np.int64)
    out[order] = np.arange(x.size, dtype=np.int64) * bins // x.size
    return out


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """MI of the joint histogram over equal-mass intensity bins (nats)."""
    ia = _rank_bins(np.asarray(a).ravel(), bins)
    ib = _rank_bins(np.asarray(b).ravel(), bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(np.float64)
    p = (joint / joint.sum()).reshape(bins, bins)
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom == 0.0:
        return 0.0
    return float(np.sum(a * b) / denom)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def apply_affine(
    v: Volume,
    t: AffineTransform,
    interpolation: str = "linear",
    reference: Volume | None = None,
    background: float = 0.0,
) -> Volume:
    """Resample v onto the reference grid through t (inverse mapping).

    Out-of-field voxels are filled with `background`. With reference=None the
    volume's own grid is used.
    """
    ref = reference if reference is not None else v
    data = warp_grid(v.data, v.spacing, v.origin, t, ref.shape, ref.spacing, ref.origin,
                     interpolation, background)
    return Volume(data, ref.spacing, ref.origin, v.modality)


def warp_grid(data, spacing, origin, t: AffineTransform, out_shape, out_spacing, out_origin,
              interpolation="linear", background=0.0) -> np.ndarray:
    if interpolation not in ("linear", "nearest"):
        raise ValidationError(f"unknown interpolation '{interpolation}'")
    sp_in = np.asarray(spacing, dtype=np.float64)
    sp_out = np.asarray(out_spacing, dtype=np.float64)
    # index-space map: j = diag(1/sp_in) A diag(sp_out) i + (A o_out + t - o_in)/sp_in
    m_idx = (t.matrix * sp_out[None, :]) / sp_in[:, None]
    off = (t.matrix @ np.asarray(out_origin, dtype=np.float64) + t.translation - np.asarray(origin)) / sp_in
    order = 1 if interpolation == "linear" else 0
    out = ndimage.affine_transform(
        data.astype(np.float32, copy=False),
        m_idx,
        offset=off,
        output_shape=tuple(out_shape),
        order=order,
        mode="constant",
        cval=float(background),
    )
    if interpolation == "nearest":
        out = out.astype(data.dtype, copy=False)
    return out


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationOptions:
    levels: tuple[int, ...] = (4, 2, 1)
    iterations: tuple[int, ...] = (6, 4, 2)  # Powell iterations per level
    mi_bins: int = 32
    dof: str = "affine"  # translation | rigid | similarity | affine
    background: float = 0.0


_DOF_SIZES = {"translation": 3, "rigid": 6, "similarity": 7, "affine": 12}


def _params_to_transform(params, dof, center_fix, center_mov) -> AffineTransform:
    """Decode an optimizer vector into a physical-space transform.

    Layout: translation(3) [+ rotation angles(3) [+ log-scale(1 or 3) [+ shear(3)]]],
    applied about the fixed volume's center.
    """
    t = np.asarray(params[:3], dtype=np.float64)
    a = np.zeros(3)
    log_s = np.zeros(3)
    shear = np.zeros(3)
    if dof in ("rigid", "similarity", "affine"):
        a = np.asarray(params[3:6], dtype=np.float64)
    if dof == "similarity":
        log_s[:] = params[6]
    elif dof == "affine":
        log_s = np.asarray(params[6:9], dtype=np.float64)
        shear = np.asarray(params[9:12], dtype=np.float64)
    cz, cy, cx = np.cos(a)
    sz, sy, sx = np.sin(a)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    sh = np.array([[1, shear[0], shear[1]], [0, 1, shear[2]], [0, 0, 1]])
    mat = rz @ ry @ rx @ np.diag(np.exp(log_s)) @ sh
    trans = center_mov + t - mat @ center_fix
    return AffineTransform(mat, trans)


def _volume_center(v: Volume) -> np.ndarray:
    return np.asarray(v.origin) + (np.asarray(v.shape, dtype=np.float64) - 1) / 2 * np.asarray(v.spacing)


def _shrink(v: Volume, factor: int) -> Volume:
    if factor <= 1:
        return v
    sigma = [factor / 2.0] * 3
    smoothed = ndimage.gaussian_filter(v.data, sigma=sigma)
    return resample(Volume(smoothed, v.spacing, v.origin, v.modality),
                    tuple(s * factor for s in v.spacing))


def register_affine(
    moving: Volume,
    atlas: Volume,
    similarity: str = "MI",
    opts: RegistrationOptions = RegistrationOptions(),
) -> AffineTransform:
    """Find the affine transform maximizing similarity(moving ∘ T, atlas).

    Multi-resolution Powell search over a center-anchored parameterization.
    The result is never worse than the identity transform; a NaN similarity
    aborts with the last valid transform attached.
    """
    if similarity not in ("MI", "NCC"):
        raise ValidationError(f"unknown similarity '{similarity}'")
    if opts.dof not in _DOF_SIZES:
        raise ValidationError(f"unknown dof '{opts.dof}'")
    n_params = _DOF_SIZES[opts.dof]

    def measure(a, b):
        if similarity == "MI":
            return mutual_information(a, b, opts.mi_bins)
        return normalized_cross_correlation(a, b)

    center_fix = _volume_center(atlas)
    center_mov = _volume_center(moving)
    last_valid = [AffineTransform.identity()]

    def objective_at(level_mov: Volume, level_fix: Volume):
        def objective(params):
            t = _params_to_transform(params, opts.dof, center_fix, center_mov)
            warped = warp_grid(level_mov.data, level_mov.spacing, level_mov.origin, t,
                               level_fix.shape, level_fix.spacing, level_fix.origin,
                               background=opts.background)
            value = measure(warped, level_fix.data)
            if not np.isfinite(value):
                raise RegistrationError("similarity became non-finite during optimization",
                                        last_transform=last_valid[0])
            last_valid[0] = t
            return -value

        return objective

    # two starts at the coarsest level: center alignment and plain identity
    params = np.zeros(n_params)
    identity_params = np.zeros(n_params)
    identity_params[:3] = center_fix - center_mov
    first = True
    for factor, maxiter in zip(opts.levels, opts.iterations):
        mov_l = _shrink(moving, factor)
        fix_l = _shrink(atlas, factor)
        obj = objective_at(mov_l, fix_l)
        if first:
            if obj(identity_params) < obj(params):
                params = identity_params.copy()
            first = False
        res = optimize.minimize(
            obj, params, method="Powell",
            options={"maxiter": maxiter, "xtol": 1e-3 * factor, "ftol": 1e-7, "disp": False},
        )
        params = res.x
    best = _params_to_transform(params, opts.dof, center_fix, center_mov)

    # never return something worse than the identity start
    def full_similarity(t):
        warped = warp_grid(moving.data, moving.spacing, moving.origin, t,
                           atlas.shape, atlas.spacing, atlas.origin, background=opts.background)
        return measure(warped, atlas.data)

    identity = AffineTransform.identity()
    if full_similarity(best) < full_similarity(identity):
        return identity
    return best


# ---------------------------------------------------------------------------
# Cropping and the per-case pipeline
# ---------------------------------------------------------------------------


def crop_fixed(v: Volume, region: CropRegion, background: float = 0.0) -> Volume:
    """Crop to the fixed region; voxels outside the volume become background."""
    out = np.full(region.size, background, dtype=np.float32)
    _copy_overlap(v.data, out, region.start)
    origin = tuple(o + s * st for o, s, st in zip(v.origin, v.spacing, region.start))
    return Volume(out, v.spacing, origin, v.modality)


def crop_mask(mask: np.ndarray, region: CropRegion) -> np.ndarray:
    out = np.zeros(region.size, dtype=mask.dtype)
    _copy_overlap(mask, out, region.start)
    return out


def _copy_overlap(src, dst, start):
    src_lo = [max(s, 0) for s in start]
    src_hi = [min(s + d, n) for s, d, n in zip(start, dst.shape, src.shape)]
    if any(lo >= hi for lo, hi in zip(src_lo, src_hi)):
        return
    dst_lo = [lo - s for lo, s in zip(src_lo, start)]
    dst_hi = [hi - s for hi, s in zip(src_hi, start)]
    dst[tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))] = src[
        tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
    ]


def covering_crop(masks, margin=(4, 16, 16), size=None) -> CropRegion:
    """Minimal region covering every mask's bounding box, plus a margin.

    With `size` given, the region is recentred on the covered box and forced
    to that fixed size.
    """
    los, his = [], []
    for m in masks:
        nz = np.nonzero(m)
        if len(nz[0]) == 0:
            continue
        los.append([int(idx.min()) for idx in nz])
        his.append([int(idx.max()) + 1 for idx in nz])
    if not los:
        raise ValidationError("covering_crop: all masks are empty")
    lo = np.min(los, axis=0) - np.asarray(margin)
    hi = np.max(his, axis=0) + np.asarray(margin)
    if size is None:
        return CropRegion(tuple(lo), tuple(hi - lo))
    center = (lo + hi) / 2.0
    start = np.round(center - np.asarray(size) / 2.0).astype(int)
    return CropRegion(tuple(start), tuple(size))


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (1.0, 0.4102, 0.4102)
    n_quantiles: int = 256
    crop_size: tuple[int, int, int] = (80, 256, 256)
    crop_start: tuple[int, int, int] | None = None  # None -> centered on atlas grid
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    background: float = 0.0

    def crop_region(self, reference_shape) -> CropRegion:
        if self.crop_start is not None:
            return CropRegion(self.crop_start, self.crop_size)
        start = tuple(int(round((n - s) / 2)) for n, s in zip(reference_shape, self.crop_size))
        return CropRegion(start, self.crop_size)


def preprocess_case(
    lv: LabeledVolume,
    atlas: Volume,
    cfg: PreprocessConfig,
    reference: Volume | None = None,
) -> tuple[LabeledVolume, AffineTransform]:
    """Full per-case pipeline: resample, histogram match, register, warp, crop.

    `reference` is the designated histogram-matching target for this case's
    modality (defaults to the atlas). The atlas must already be at the target
    spacing. Returns the processed case and the recovered transform.
    """
    reference = reference if reference is not None else atlas

    def stage(name, fn):
        try:
            return fn()
        except Exception as e:  # noqa: BLE001 - retag with the stage name
            raise PreprocessError(name, e) from e

    img = stage("resample", lambda: resample(lv.image, cfg.target_spacing, "linear"))
    shape = img.shape
    vs = stage("resample", lambda: resample_grid(lv.vs_mask, lv.image.spacing,
                                                 cfg.target_spacing, shape, "nearest"))
    gif = None
    if lv.gif_mask is not None:
        gif = stage("resample", lambda: resample_grid(lv.gif_mask, lv.image.spacing,
                                                      cfg.target_spacing, shape, "nearest"))

    img = stage("match", lambda: histogram_match(img, reference, cfg.n_quantiles))

    sim = "MI" if img.modality == Modality.T1 else "NCC"
    transform = stage("register", lambda: register_affine(img, atlas, sim, cfg.registration))

    warped = stage("warp", lambda: apply_affine(img, transform, "linear", atlas, cfg.background))
    vs_w = stage("warp", lambda: warp_grid(vs, cfg.target_spacing, img.origin, transform,
                                           atlas.shape, atlas.spacing, atlas.origin, "nearest"))
    gif_w = None
    if gif is not None:
        gif_w = stage("warp", lambda: warp_grid(gif, cfg.target_spacing, img.origin, transform,
                                                atlas.shape, atlas.spacing, atlas.origin, "nearest"))

    region = cfg.crop_region(atlas.shape)
    out_img = stage("crop", lambda: crop_fixed(warped, region, cfg.background))
    out_vs = stage("crop", lambda: crop_mask(vs_w, region))
    out_gif = stage("crop", lambda: crop_mask(gif_w, region)) if gif_w is not None else None

    result = LabeledVolume(out_img, out_vs, out_gif, lv.koos_grade, lv.subject_id)
    return result, transform
