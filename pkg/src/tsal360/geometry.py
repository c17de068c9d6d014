"""Spherical geometry: viewport layouts, gnomonic projection, ERP sampling.

Conventions used throughout the package: latitude in [-pi/2, pi/2] with
north positive, longitude in [-pi, pi) with east positive, all angles in
radians unless a name says otherwise.  An equirectangular (ERP) grid of
H x W pixels (W = 2H) places the center of pixel (row i, col j) at
lat = pi/2 - (i + 0.5) * pi / H and lon = -pi + (j + 0.5) * 2*pi / W.

Tangent patches use image coordinates: u grows east, v grows south.  The
patch midpoint (P/2, P/2) is the tangent point and a point at angular
distance fov/2 due east of the center lands on column u = P - 1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


class CoverageError(ValueError):
    """A viewport layout leaves part of the sphere uncovered."""


class SphPoint(NamedTuple):
    lat: float
    lon: float


def normalize_point(lat: float, lon: float) -> SphPoint:
    """Wrap (lat, lon) into lat in [-pi/2, pi/2], lon in [-pi, pi).

    Latitudes beyond a pole flip to the far side of it (and shift lon by pi),
    so the result always names the same direction as the input.
    """
    if not (np.isfinite(lat) and np.isfinite(lon)):
        raise ValueError(f"non-finite sphere point ({lat}, {lon})")
    lat = (lat + np.pi) % TWO_PI - np.pi
    if lat > np.pi / 2:
        lat = np.pi - lat
        lon += np.pi
    elif lat < -np.pi / 2:
        lat = -np.pi - lat
        lon += np.pi
    lon = (lon + np.pi) % TWO_PI - np.pi
    return SphPoint(float(lat), float(lon))


def haversine(a: SphPoint, b: SphPoint) -> float:
    """Great-circle angular distance between two sphere points, in radians."""
    return float(_haversine(a.lat, a.lon, b.lat, b.lon))


def _haversine(lat1, lon1, lat2, lon2):
    """Array-friendly haversine; stable for small and near-antipodal pairs."""
    s1 = np.sin((lat2 - lat1) / 2.0) ** 2
    s2 = np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return 2.0 * np.arcsin(np.sqrt(np.clip(s1 + s2, 0.0, 1.0)))


def _unit_vectors(lat, lon):
    """(lat, lon) arrays -> unit vectors, stacked on the last axis."""
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def _tangent_basis(center: SphPoint):
    """Unit vectors (center, east, north) of the tangent plane at `center`."""
    lat, lon = center
    c = np.array([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    e = np.array([-np.sin(lon), np.cos(lon), 0.0])
    n = np.array([-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon), np.cos(lat)])
    return c, e, n


@dataclass(frozen=True)
class ErpGrid:
    """Equirectangular pixel grid; width must be twice the height."""

    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width != 2 * self.height:
            raise ValueError(f"not an ERP grid: {self.height}x{self.width} (need W = 2H)")

    def pixel_latlon(self):
        """Per-row latitudes (H,) and per-column longitudes (W,) of pixel centers."""
        lat = np.pi / 2 - (np.arange(self.height) + 0.5) * np.pi / self.height
        lon = -np.pi + (np.arange(self.width) + 0.5) * TWO_PI / self.width
        return lat, lon


@dataclass(frozen=True)
class ViewportLayout:
    """A set of tangent viewports: centers, shared field of view, patch size."""

    centers: tuple[SphPoint, ...]
    fov: float
    patch_res: int

    def __post_init__(self):
        if not (0.0 < self.fov < np.pi):
            raise ValueError(f"fov must be in (0, pi), got {self.fov}")
        if self.patch_res < 4 or self.patch_res % 2:
            raise ValueError(f"patch_res must be an even integer >= 4, got {self.patch_res}")
        if len(set(self.centers)) != len(self.centers):
            raise ValueError("viewport centers must be pairwise distinct")

    @property
    def count(self) -> int:
        return len(self.centers)

    def center_array(self) -> np.ndarray:
        return np.array(self.centers, dtype=np.float64)


def _ring_centers(ring_lat: float, per_ring: int) -> list[SphPoint]:
    step = TWO_PI / per_ring
    return [normalize_point(ring_lat, -np.pi + k * step) for k in range(per_ring)]


def _fibonacci_centers(count: int) -> list[SphPoint]:
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - (2.0 * np.arange(count) + 1.0) / count
    return [normalize_point(float(np.arcsin(zi)), float(golden * k)) for k, zi in enumerate(z)]


# Ring latitude for the 18-viewport grid.  +-45 deg leaves the polar caps
# more than fov/2 = 40 deg from every center; +-54 deg covers the sphere
# with ~2.4 deg margin at an 80 deg field of view.
RING_LAT_18 = np.deg2rad(54.0)


def build_layout(count: int, fov: float, patch_res: int) -> ViewportLayout:
    """Build a deterministic viewport layout and verify full sphere coverage.

    count == 1 places a single viewport at (0, 0); count == 18 uses three
    latitude rings of six equally spaced longitudes; any other count falls
    back to a Fibonacci spiral.  Raises CoverageError (naming the worst
    uncovered direction) if some sphere point is farther than fov/2 from
    every center.
    """
    if count < 1:
        raise ValueError(f"viewport count must be >= 1, got {count}")
    if count == 1:
        # degenerate single-viewport layout: can never cover the far
        # hemisphere, so the coverage check is skipped for it
        return ViewportLayout(
            centers=(SphPoint(0.0, 0.0),), fov=float(fov), patch_res=int(patch_res)
        )
    if count == 18:
        centers = (
            _ring_centers(-RING_LAT_18, 6) + _ring_centers(0.0, 6) + _ring_centers(RING_LAT_18, 6)
        )
    else:
        centers = _fibonacci_centers(count)
    layout = ViewportLayout(centers=tuple(centers), fov=float(fov), patch_res=int(patch_res))
    _check_coverage(layout)
    return layout


def _check_coverage(layout: ViewportLayout, step_deg: float = 1.0) -> None:
    """Scan a dense lat/lon grid plus both poles for uncovered directions."""
    lats = np.deg2rad(np.arange(-90.0, 90.0 + step_deg, step_deg))
    lons = np.deg2rad(np.arange(-180.0, 180.0, step_deg))
    glat, glon = np.meshgrid(lats, lons, indexing="ij")
    c = layout.center_array()
    dmin = np.full(glat.shape, np.inf)
    for clat, clon in c:
        np.minimum(dmin, _haversine(glat, glon, clat, clon), out=dmin)
    worst = np.unravel_index(np.argmax(dmin), dmin.shape)
    if dmin[worst] > layout.fov / 2.0:
        lat_d, lon_d = np.rad2deg(glat[worst]), np.rad2deg(glon[worst])
        raise CoverageError(
            f"layout leaves an uncovered cap around lat={lat_d:.2f} deg, "
            f"lon={lon_d:.2f} deg: nearest center is "
            f"{np.rad2deg(dmin[worst]):.2f} deg away but fov/2 is "
            f"{np.rad2deg(layout.fov / 2.0):.2f} deg"
        )


# ---------------------------------------------------------------------------
# Gnomonic projection


def _pixel_scale(fov: float, patch_res: int) -> float:
    # Maps tangent-plane coordinate tan(fov/2) to the half-width in pixels
    # between the patch midpoint P/2 and the edge column P-1.
    return np.tan(fov / 2.0) / (patch_res / 2.0 - 1.0)


def gnomonic_forward(center: SphPoint, p: SphPoint, fov: float, patch_res: int):
    """Project sphere point `p` onto the tangent patch at `center`.

    Returns pixel coordinates (u, v) as floats, or None when `p` lies on or
    behind the tangent plane (angular distance >= pi/2 from the center).
    Coordinates may fall outside [0, patch_res - 1] for points that are in
    front of the plane but outside the patch.
    """
    c, e, n = _tangent_basis(center)
    vec = _unit_vectors(np.float64(p.lat), np.float64(p.lon))
    w = float(vec @ c)
    if w <= 0.0:
        return None
    x = float(vec @ e) / w
    y = float(vec @ n) / w
    s = _pixel_scale(fov, patch_res)
    half = patch_res / 2.0
    return (half + x / s, half - y / s)


def gnomonic_inverse(center: SphPoint, u: float, v: float, fov: float, patch_res: int) -> SphPoint:
    """Map patch pixel coordinates back to the sphere (exact inverse)."""
    s = _pixel_scale(fov, patch_res)
    half = patch_res / 2.0
    x = (u - half) * s
    y = (half - v) * s
    c, e, n = _tangent_basis(center)
    vec = c + x * e + y * n
    vec /= np.linalg.norm(vec)
    return SphPoint(float(np.arcsin(np.clip(vec[2], -1.0, 1.0))), float(np.arctan2(vec[1], vec[0])))


def _patch_latlon_grid(center: SphPoint, fov: float, patch_res: int):
    """Sphere coordinates of every pixel center of a tangent patch."""
    s = _pixel_scale(fov, patch_res)
    half = patch_res / 2.0
    idx = np.arange(patch_res, dtype=np.float64)
    x = (idx - half) * s                       # per column
    y = (half - idx) * s                       # per row
    c, e, n = _tangent_basis(center)
    vec = c[None, None, :] + y[:, None, None] * n[None, None, :] + x[None, :, None] * e[None, None, :]
    vec /= np.linalg.norm(vec, axis=-1, keepdims=True)
    lat = np.arcsin(np.clip(vec[..., 2], -1.0, 1.0))
    lon = np.arctan2(vec[..., 1], vec[..., 0])
    return lat, lon


# ---------------------------------------------------------------------------
# ERP sampling


def bilinear_sample_erp(images: np.ndarray, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Sample ERP images at sphere points with wraparound in longitude.

    `images` has shape (..., H, W); `lat`/`lon` share an arbitrary shape S.
    Returns shape (..., *S).  Longitude wraps circularly; latitude clamps at
    the poles.
    """
    h, w = images.shape[-2], images.shape[-1]
    xc = (lon + np.pi) / TWO_PI * w - 0.5
    yc = np.clip((np.pi / 2 - lat) / np.pi * h - 0.5, 0.0, h - 1.0)
    j0 = np.floor(xc).astype(np.int64)
    wx = xc - j0
    j0 %= w
    j1 = (j0 + 1) % w
    i0 = np.floor(yc).astype(np.int64)
    wy = yc - i0
    i1 = np.minimum(i0 + 1, h - 1)
    flat = images.reshape(*images.shape[:-2], h * w)
    g = lambda i, j: flat[..., (i * w + j).ravel()].reshape(*images.shape[:-2], *lat.shape)
    return (
        g(i0, j0) * ((1 - wy) * (1 - wx))
        + g(i0, j1) * ((1 - wy) * wx)
        + g(i1, j0) * (wy * (1 - wx))
        + g(i1, j1) * (wy * wx)
    )


@dataclass
class ErpFrameSequence:
    """A window of F equirectangular frames, shape (F, C, H, W), values in [0, 1]."""

    data: np.ndarray
    grid: ErpGrid = field(init=False)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"frame data must be (F, C, H, W), got shape {self.data.shape}")
        self.grid = ErpGrid(height=self.data.shape[2], width=self.data.shape[3])


@dataclass
class TangentStack:
    """Gnomonic tangent images, shape (F, T, C, P, P), plus their layout."""

    data: np.ndarray
    layout: ViewportLayout

    def __post_init__(self):
        f, t, c, p1, p2 = self.data.shape
        if t != self.layout.count or p1 != p2 or p1 != self.layout.patch_res:
            raise ValueError(
                f"tangent stack shape {self.data.shape} does not match layout "
                f"(T={self.layout.count}, P={self.layout.patch_res})"
            )


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TSAL_THREADS", "1")))
    except ValueError:
        return 1


def project_to_tangents(frames: ErpFrameSequence, layout: ViewportLayout) -> TangentStack:
    """Project ERP frames into gnomonic tangent images, (F, T, C, P, P)."""
    f, c, _, _ = frames.data.shape
    p = layout.patch_res
    out = np.empty((f, layout.count, c, p, p), dtype=np.float32)

    def fill(t: int) -> None:
        lat, lon = _patch_latlon_grid(layout.centers[t], layout.fov, p)
        out[:, t] = bilinear_sample_erp(frames.data, lat, lon)

    workers = _worker_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(layout.count)))
    else:
        for t in range(layout.count):
            fill(t)
    return TangentStack(data=out, layout=layout)


# ---------------------------------------------------------------------------
# Inverse (blend) projection


@dataclass(frozen=True)
class BlendPlan:
    """Precomputed linear map from a (T, P, P) patch stack to an ERP grid.

    For ERP pixel n,
    ``out[n] = sum_k stack.ravel()[idx[n, k]] * weight[n, k] / total[n]``.
    Each in-view viewport contributes four bilinear corners weighted by the
    cosine of the angular distance to its center.  Weights are divided by
    their sum only at apply time so that blending an all-ones stack yields
    exactly 1.0 at every pixel.
    """

    grid: ErpGrid
    patch_res: int
    count: int
    idx: np.ndarray       # (H*W, K) int64 into the flattened stack
    weight: np.ndarray    # (H*W, K) float64, unnormalized
    total: np.ndarray     # (H*W,) row sums of weight, > 0 everywhere


@lru_cache(maxsize=8)
def build_blend_plan(layout: ViewportLayout, patch_res: int, grid: ErpGrid) -> BlendPlan:
    """Build the per-pixel gather plan for blending patches of `patch_res`."""
    lat_r, lon_c = grid.pixel_latlon()
    lat = np.repeat(lat_r, grid.width)
    lon = np.tile(lon_c, grid.height)
    npx = lat.size
    vec = _unit_vectors(lat, lon)                       # (N, 3)
    s = _pixel_scale(layout.fov, patch_res)
    half = patch_res / 2.0

    idx_parts, w_parts = [], []
    for t, center in enumerate(layout.centers):
        c, e, n = _tangent_basis(center)
        w = vec @ c                                     # cos(angular distance)
        front = w > 0.0
        wsafe = np.where(front, w, 1.0)
        u = half + (vec @ e) / wsafe / s
        v = half - (vec @ n) / wsafe / s
        inview = front & (u >= 0) & (u <= patch_res - 1) & (v >= 0) & (v <= patch_res - 1)
        u = np.clip(u, 0, patch_res - 1)
        v = np.clip(v, 0, patch_res - 1)
        j0 = np.minimum(np.floor(u).astype(np.int64), patch_res - 2)
        i0 = np.minimum(np.floor(v).astype(np.int64), patch_res - 2)
        wx = u - j0
        wy = v - i0
        base = t * patch_res * patch_res + i0 * patch_res + j0
        cw = np.where(inview, w, 0.0)
        corners = [
            (base, (1 - wy) * (1 - wx)),
            (base + 1, (1 - wy) * wx),
            (base + patch_res, wy * (1 - wx)),
            (base + patch_res + 1, wy * wx),
        ]
        for bidx, bw in corners:
            idx_parts.append(np.where(inview, bidx, 0))
            w_parts.append(cw * bw)

    idx = np.stack(idx_parts, axis=1)
    weight = np.stack(w_parts, axis=1)
    total = weight.sum(axis=1)
    if np.any(total <= 0.0):
        bad = int(np.argmin(total))
        raise CoverageError(
            f"ERP pixel (row {bad // grid.width}, col {bad % grid.width}) at "
            f"lat={np.rad2deg(lat[bad]):.2f} deg, lon={np.rad2deg(lon[bad]):.2f} deg "
            "is covered by no viewport"
        )
    return BlendPlan(
        grid=grid, patch_res=patch_res, count=layout.count, idx=idx, weight=weight, total=total
    )


def apply_blend_plan(plan: BlendPlan, maps: np.ndarray) -> np.ndarray:
    """Apply a blend plan to a (T, P, P) stack; returns (H, W), unnormalized."""
    if maps.shape != (plan.count, plan.patch_res, plan.patch_res):
        raise ValueError(
            f"patch stack shape {maps.shape} does not match blend plan "
            f"({plan.count}, {plan.patch_res}, {plan.patch_res})"
        )
    flat = maps.reshape(-1)
    out = (flat[plan.idx] * plan.weight).sum(axis=1) / plan.total
    return out.reshape(plan.grid.height, plan.grid.width)


def blend_inverse(maps: np.ndarray, layout: ViewportLayout, out: ErpGrid) -> np.ndarray:
    """Blend per-tangent saliency maps (T, P, P) back onto an ERP grid.

    Each ERP pixel is the cosine-weighted average of all tangent maps that
    see it; the result is max-normalized to [0, 1] when its max is positive.
    """
    plan = build_blend_plan(layout, maps.shape[-1], out)
    blended = apply_blend_plan(plan, np.asarray(maps, dtype=np.float64))
    peak = blended.max()
    if peak > 0.0:
        blended = blended / peak
    return blended


# ---------------------------------------------------------------------------
# Fixation smoothing


def fixations_from_dense(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert a dense ERP fixation-count grid to (points (N, 2), weights (N,))."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("fixation counts must be nonnegative")
    grid = ErpGrid(height=counts.shape[0], width=counts.shape[1])
    rows, cols = np.nonzero(counts)
    lat_r, lon_c = grid.pixel_latlon()
    pts = np.column_stack([lat_r[rows], lon_c[cols]])
    return pts, counts[rows, cols].astype(np.float64)


def spherical_gaussian_smooth(
    points: np.ndarray,
    weights: np.ndarray | None,
    sigma_deg: float,
    out: ErpGrid,
) -> np.ndarray:
    """Smooth fixation points with a great-circle Gaussian kernel.

    ``points`` is (N, 2) of (lat, lon) radians; ``weights`` defaults to 1.
    Every output pixel accumulates ``w * exp(-d^2 / (2 sigma^2))`` with d the
    haversine distance in degrees, then the map is max-normalized.  An empty
    point set yields an all-zero map.
    """
    if sigma_deg <= 0:
        raise ValueError(f"sigma must be positive, got {sigma_deg} deg")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if weights is None:
        weights = np.ones(len(points))
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("fixation weights must be nonnegative")
    lat_r, lon_c = out.pixel_latlon()
    acc = np.zeros((out.height, out.width), dtype=np.float64)
    denom = 2.0 * sigma_deg * sigma_deg
    for (lat, lon), w in zip(points, weights):
        d = np.rad2deg(_haversine(lat_r[:, None], lon_c[None, :], lat, lon))
        acc += w * np.exp(-(d * d) / denom)
    peak = acc.max()
    if peak > 0.0:
        acc /= peak
    return acc
