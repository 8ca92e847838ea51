"""Synthetic rectified stereo pairs with exact disparity and occlusion.

A scene is a stack of fronto-parallel layers: a full-frame background plus
randomly placed shapes (polygons, ellipses, line segments), each carrying a
constant integer disparity. Layers are ordered by disparity, nearest last.
Every layer is rasterized once on a canvas extended by d_max columns; the
left view is the canvas slice [0, W) and the right view the slice
[d, W + d), so the two views of a layer are exact integer translations of
one another. Occlusion is exact z-order coverage plus out-of-frame warps.

Shape corners and line endpoints at integer coordinates double as oracle
interest points.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .errors import ConfigError, ContractError
from .interest import PointSet

SHAPE_KINDS = ("polygon", "ellipse", "line")
MIN_IMAGE_SIZE = 16


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    layers: int = 4
    shapes: tuple[str, ...] = SHAPE_KINDS
    d_min: int = 0
    d_max: int = 24
    noise: float = 0.0
    antialias: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.height < MIN_IMAGE_SIZE or self.width < MIN_IMAGE_SIZE:
            raise ConfigError(
                f"image {self.height}x{self.width} too small to fit shapes "
                f"(minimum {MIN_IMAGE_SIZE})")
        if self.layers < 1:
            raise ConfigError("layer count must be >= 1")
        if not (0 <= self.d_min <= self.d_max):
            raise ConfigError(f"need 0 <= d_min <= d_max, got [{self.d_min}, {self.d_max}]")
        if self.d_max >= self.width:
            raise ConfigError(f"d_max={self.d_max} must be < width={self.width}")
        if self.noise < 0:
            raise ConfigError("noise amplitude must be >= 0")
        bad = [s for s in self.shapes if s not in SHAPE_KINDS]
        if bad:
            raise ConfigError(f"unknown shape kinds {bad}; choose from {SHAPE_KINDS}")
        if self.layers > 1 and not self.shapes:
            raise ConfigError("shape vocabulary is empty but layers > 1")


@dataclass
class StereoSample:
    """Rectified pair with dense left-view disparity and exact masks."""

    left: np.ndarray
    right: np.ndarray
    disparity: np.ndarray
    valid_mask: np.ndarray
    occ_mask: np.ndarray
    oracle_points_l: PointSet = field(default_factory=PointSet)
    oracle_points_r: PointSet = field(default_factory=PointSet)

    @property
    def shape(self):
        return self.left.shape

    def validate(self) -> None:
        h, w = self.left.shape
        for name in ("right", "disparity", "valid_mask", "occ_mask"):
            if getattr(self, name).shape != (h, w):
                raise ContractError(f"{name} shape {getattr(self, name).shape} != {(h, w)}")
        if (self.disparity[self.valid_mask] < 0).any():
            raise ContractError("negative disparity on valid pixels")
        if (self.occ_mask & ~self.valid_mask).any():
            raise ContractError("occlusion flagged where disparity is undefined")
        xs = np.arange(w)[None, :].repeat(h, axis=0)
        visible = self.valid_mask & ~self.occ_mask
        if (xs[visible] - self.disparity[visible] < 0).any():
            raise ContractError("non-occluded pixel warps out of frame")
        self.oracle_points_l.validate_bounds(h, w)
        self.oracle_points_r.validate_bounds(h, w)


class _Layer:
    """One rasterized layer: coverage on the extended canvas plus metadata."""

    __slots__ = ("coverage", "value", "disparity", "junctions")

    def __init__(self, coverage, value, disparity, junctions):
        self.coverage = coverage              # (H, W+d_max) in [0,1]
        self.value = value                    # (H, W+d_max) intensity incl. texture
        self.disparity = disparity            # int
        self.junctions = junctions            # list[(x, y)] int canvas coords


def _poly_coverage(verts: np.ndarray, height: int, ext_width: int, ss: int) -> np.ndarray:
    """Even-odd point-in-polygon coverage on the (super)sampled canvas grid."""
    ys = (np.arange(height * ss) - (ss - 1) / 2) / ss
    xs = (np.arange(ext_width * ss) - (ss - 1) / 2) / ss
    gx, gy = np.meshgrid(xs, ys)
    inside = np.zeros(gx.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > gy) != (y2 > gy)
        xcut = (x2 - x1) * (gy - y1) / (y2 - y1) + x1
        inside ^= crosses & (gx < xcut)
    return inside.reshape(height, ss, ext_width, ss).mean(axis=(1, 3))


def _ellipse_coverage(cx, cy, ax, bx, theta, height, ext_width, ss) -> np.ndarray:
    ys = (np.arange(height * ss) - (ss - 1) / 2) / ss
    xs = (np.arange(ext_width * ss) - (ss - 1) / 2) / ss
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = gx - cx, gy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    inside = (u / ax) ** 2 + (v / bx) ** 2 <= 1.0
    return inside.reshape(height, ss, ext_width, ss).mean(axis=(1, 3))


def _segment_coverage(p0, p1, half_width, height, ext_width, ss) -> np.ndarray:
    ys = (np.arange(height * ss) - (ss - 1) / 2) / ss
    xs = (np.arange(ext_width * ss) - (ss - 1) / 2) / ss
    gx, gy = np.meshgrid(xs, ys)
    px, py = p0
    qx, qy = p1
    vx, vy = qx - px, qy - py
    seg_len2 = vx * vx + vy * vy
    t = np.clip(((gx - px) * vx + (gy - py) * vy) / seg_len2, 0.0, 1.0)
    dist2 = (gx - (px + t * vx)) ** 2 + (gy - (py + t * vy)) ** 2
    inside = dist2 <= half_width * half_width
    return inside.reshape(height, ss, ext_width, ss).mean(axis=(1, 3))


def _sample_polygon(rng, height, width):
    margin = max(4, min(height, width) // 8)
    rmax = max(4.0, min(height, width) / 3.0)
    for _ in range(32):
        n = int(rng.integers(3, 7))
        cx = int(rng.integers(margin, width - margin))
        cy = int(rng.integers(margin, height - margin))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        if n > 2 and np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))) < 0.35:
            continue
        radii = rng.uniform(3.0, rmax, n)
        verts = np.stack([np.round(cx + radii * np.cos(angles)),
                          np.round(cy + radii * np.sin(angles))], axis=1).astype(int)
        uniq = list(dict.fromkeys(map(tuple, verts.tolist())))
        if len(uniq) >= 3:
            return np.asarray(uniq, dtype=np.float64)
    raise ConfigError(f"cannot fit a polygon into a {height}x{width} frame")


def _sample_line(rng, height, width):
    margin = max(2, min(height, width) // 16)
    for _ in range(32):
        p0 = (int(rng.integers(margin, width - margin)),
              int(rng.integers(margin, height - margin)))
        p1 = (int(rng.integers(margin, width - margin)),
              int(rng.integers(margin, height - margin)))
        if (p0[0] - p1[0]) ** 2 + (p0[1] - p1[1]) ** 2 >= 36:
            return p0, p1
    raise ConfigError(f"cannot fit a line segment into a {height}x{width} frame")


def _make_layer(kind, disparity, rng, config: SceneConfig, ext_width: int) -> _Layer:
    height, width = config.height, config.width
    ss = 2 if config.antialias else 1
    if kind == "background":
        coverage = np.ones((height, ext_width), dtype=np.float64)
        junctions = []
    elif kind == "polygon":
        verts = _sample_polygon(rng, height, width)
        coverage = _poly_coverage(verts, height, ext_width, ss)
        junctions = [(int(x), int(y)) for x, y in verts]
    elif kind == "ellipse":
        margin = max(4, min(height, width) // 8)
        cx = int(rng.integers(margin, width - margin))
        cy = int(rng.integers(margin, height - margin))
        rmax = max(4.0, min(height, width) / 4.0)
        ax = float(rng.uniform(3.0, rmax))
        bx = float(rng.uniform(3.0, rmax))
        theta = float(rng.uniform(0, np.pi))
        coverage = _ellipse_coverage(cx, cy, ax, bx, theta, height, ext_width, ss)
        junctions = []  # smooth contour, no corners
    elif kind == "line":
        p0, p1 = _sample_line(rng, height, width)
        half_width = float(rng.integers(1, 3)) / 2.0
        coverage = _segment_coverage(p0, p1, half_width, height, ext_width, ss)
        junctions = [p0, p1]
    else:  # pragma: no cover - guarded by SceneConfig.validate
        raise ConfigError(f"unknown shape kind {kind!r}")

    # Junction pixels always belong to their own layer so corner disparity
    # and occlusion reflect that layer exactly.
    for x, y in junctions:
        if 0 <= x < ext_width and 0 <= y < height:
            coverage[y, x] = 1.0

    base = float(rng.uniform(0.1, 0.95))
    value = np.full((height, ext_width), base, dtype=np.float64)
    if config.noise > 0:
        value = value + config.noise * rng.uniform(-1.0, 1.0, size=value.shape)
    value = np.clip(value, 0.0, 1.0)
    return _Layer(coverage, value, disparity, junctions)


def _sample_disparities(rng, config: SceneConfig) -> list[int]:
    span = config.d_max - config.d_min + 1
    if span >= config.layers:
        picks = rng.choice(span, size=config.layers, replace=False)
    else:
        picks = rng.integers(0, span, size=config.layers)
    return sorted(int(p) + config.d_min for p in picks)


def generate_scene(config: SceneConfig) -> StereoSample:
    """Render one stereo sample. Deterministic given config (incl. seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    height, width = config.height, config.width
    ext_width = width + config.d_max

    disparities = _sample_disparities(rng, config)
    kinds = ["background"] + [
        str(rng.choice(list(config.shapes))) for _ in range(config.layers - 1)]
    layers = [_make_layer(kind, disp, rng, config, ext_width)
              for kind, disp in zip(kinds, disparities)]

    # Back-to-front composite of both views; owner maps record the nearest
    # covering layer per pixel (hard coverage >= 0.5 when anti-aliased).
    left = np.zeros((height, width), dtype=np.float64)
    right = np.zeros((height, width), dtype=np.float64)
    owner_left = np.full((height, width), -1, dtype=np.int32)
    owner_right = np.full((height, width), -1, dtype=np.int32)
    for k, layer in enumerate(layers):
        d = layer.disparity
        cov_l = layer.coverage[:, :width]
        cov_r = layer.coverage[:, d:width + d]
        val_l = layer.value[:, :width]
        val_r = layer.value[:, d:width + d]
        left = left * (1.0 - cov_l) + val_l * cov_l
        right = right * (1.0 - cov_r) + val_r * cov_r
        owner_left[cov_l >= 0.5] = k
        owner_right[cov_r >= 0.5] = k

    disparity = np.zeros((height, width), dtype=np.float32)
    occ = np.zeros((height, width), dtype=bool)
    xs = np.arange(width)[None, :].repeat(height, axis=0)
    for k, layer in enumerate(layers):
        mine = owner_left == k
        if not mine.any():
            continue
        disparity[mine] = float(layer.disparity)
        warped_x = xs - layer.disparity
        out = warped_x < 0
        covered = np.zeros((height, width), dtype=bool)
        inb = mine & ~out
        covered[inb] = owner_right[np.nonzero(inb)[0], warped_x[inb]] != k
        occ |= mine & (out | covered)
    valid = np.ones((height, width), dtype=bool)

    pts_l, pts_r = [], []
    for k, layer in enumerate(layers):
        d = layer.disparity
        for x, y in layer.junctions:
            if 0 <= x < width and 0 <= y < height and owner_left[y, x] == k:
                pts_l.append((float(x), float(y)))
            xr = x - d
            if 0 <= xr < width and 0 <= y < height and owner_right[y, xr] == k:
                pts_r.append((float(xr), float(y)))

    def _point_set(pts):
        if not pts:
            return PointSet()
        arr = np.asarray(pts, dtype=np.float64)
        return PointSet.sorted(arr, np.ones(len(arr)))

    sample = StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        disparity=disparity,
        valid_mask=valid,
        occ_mask=occ,
        oracle_points_l=_point_set(pts_l),
        oracle_points_r=_point_set(pts_r),
    )
    sample.validate()
    return sample


def warp_consistency_error(sample: StereoSample) -> float:
    """Mean |left - right(warped)| over non-occluded valid pixels.

    Forward-warps left pixels by the ground-truth disparity (linear
    interpolation along the row for fractional values) and compares to the
    right image. Used as a generation self-check; zero up to float noise for
    noise-free scenes.
    """
    height, width = sample.left.shape
    xs = np.arange(width, dtype=np.float64)[None, :].repeat(height, axis=0)
    xw = xs - sample.disparity.astype(np.float64)
    mask = sample.valid_mask & ~sample.occ_mask & (xw >= 0) & (xw <= width - 1)
    if not mask.any():
        return 0.0
    x0 = np.floor(xw).astype(int)
    frac = xw - x0
    x1 = np.minimum(x0 + 1, width - 1)
    rows = np.nonzero(mask)[0]
    r0 = sample.right[rows, x0[mask]]
    r1 = sample.right[rows, x1[mask]]
    warped = r0 * (1 - frac[mask]) + r1 * frac[mask]
    return float(np.mean(np.abs(sample.left[mask] - warped)))


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed: derived additively so generation parallelizes."""
    return base_seed + index


def save_sample(sample: StereoSample, out_dir, stem: str) -> fileio.SampleFiles:
    names = fileio.SampleFiles(
        left=f"{stem}_left.pfm",
        right=f"{stem}_right.pfm",
        disparity=f"{stem}_disp.pfm",
        valid_mask=f"{stem}_valid.png",
        occ_mask=f"{stem}_occ.png",
        points_left=f"{stem}_points_l.txt",
        points_right=f"{stem}_points_r.txt",
    )
    paths = names.resolve(out_dir)
    fileio.write_pfm(sample.left, paths.left)
    fileio.write_pfm(sample.right, paths.right)
    fileio.write_pfm(sample.disparity, paths.disparity)
    fileio.write_mask_png(sample.valid_mask, paths.valid_mask)
    fileio.write_mask_png(sample.occ_mask, paths.occ_mask)
    fileio.write_points(sample.oracle_points_l.coords, sample.oracle_points_l.scores,
                        paths.points_left)
    fileio.write_points(sample.oracle_points_r.coords, sample.oracle_points_r.scores,
                        paths.points_right)
    return names


def load_sample(files: fileio.SampleFiles, root=None) -> StereoSample:
    paths = files.resolve(root) if root is not None else files
    coords_l, scores_l = fileio.read_points(paths.points_left)
    coords_r, scores_r = fileio.read_points(paths.points_right)
    sample = StereoSample(
        left=fileio.read_pfm(paths.left),
        right=fileio.read_pfm(paths.right),
        disparity=fileio.read_pfm(paths.disparity),
        valid_mask=fileio.read_mask_png(paths.valid_mask),
        occ_mask=fileio.read_mask_png(paths.occ_mask),
        oracle_points_l=PointSet(coords_l, scores_l),
        oracle_points_r=PointSet(coords_r, scores_r),
    )
    sample.validate()
    return sample


def make_dataset(config: SceneConfig, count: int, out_dir, base_seed: int | None = None) -> str:
    """Generate `count` samples into out_dir and write the manifest.

    Sample i uses seed base_seed + i (base_seed defaults to config.seed).
    Returns the manifest path.
    """
    config.validate()
    if count < 0:
        raise ConfigError("count must be >= 0")
    base = config.seed if base_seed is None else base_seed
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(count):
        cfg = dataclasses.replace(config, seed=sample_seed(base, i))
        sample = generate_scene(cfg)
        entries.append(save_sample(sample, out_dir, f"{i:05d}"))
    manifest = os.path.join(out_dir, fileio.MANIFEST_NAME)
    fileio.write_manifest(entries, manifest)
    return manifest


def load_dataset(data_dir) -> list[StereoSample]:
    manifest = os.path.join(data_dir, fileio.MANIFEST_NAME)
    return [load_sample(e, root=data_dir) for e in fileio.read_manifest(manifest)]
