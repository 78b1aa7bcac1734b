"""CPU orthographic soft-splat renderer.

Pixel convention: continuous pixel coordinates, pixel j spans [j, j+1) with
center j+0.5; image row 0 is the top of the window (v grows downward). The
window center projects to (W/2, H/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianSet, quat_to_matrix
from .errors import InvalidArgumentError

# 2D covariances with eigenvalue ratio beyond this are treated as singular
COND_LIMIT = 1e12

_AXIS_FORWARD = {
    "+x": np.array([1.0, 0.0, 0.0]),
    "-x": np.array([-1.0, 0.0, 0.0]),
    "+y": np.array([0.0, 1.0, 0.0]),
    "-y": np.array([0.0, -1.0, 0.0]),
    "+z": np.array([0.0, 0.0, 1.0]),
    "-z": np.array([0.0, 0.0, -1.0]),
}


@dataclass
class OrthoCamera:
    """Orthographic view: rows of ``rotation`` are (right, up, forward) in world
    space; the window spans width x height meters centered on ``center``."""

    rotation: np.ndarray  # (3,3)
    center: np.ndarray  # (3,)
    width: float
    height: float
    resolution: tuple[int, int]  # (W, H) pixels

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.center = np.ascontiguousarray(self.center, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.center.shape != (3,):
            raise InvalidArgumentError("camera rotation must be (3,3) and center (3,)")
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.center))):
            raise InvalidArgumentError("camera contains non-finite values")
        ortho_err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if ortho_err > 1e-6 or np.linalg.det(self.rotation) < 0.0:
            raise InvalidArgumentError("camera rotation must be a proper rotation matrix")
        if not (self.width > 0.0 and self.height > 0.0):
            raise InvalidArgumentError("window extents must be positive")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise InvalidArgumentError("resolution must be positive")

    @classmethod
    def axis_view(cls, axis: str, center, width: float, height: float,
                  resolution: tuple[int, int]) -> "OrthoCamera":
        """Canonical view along a coordinate axis ('+x', '-y', '+z', ...)."""
        if axis not in _AXIS_FORWARD:
            raise InvalidArgumentError(f"unknown axis {axis!r}")
        forward = _AXIS_FORWARD[axis]
        up_hint = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
        right = np.cross(up_hint, forward)
        right = right / np.linalg.norm(right)
        up = np.cross(forward, right)
        return cls(rotation=np.stack([right, up, forward]), center=np.asarray(center, dtype=np.float64),
                   width=width, height=height, resolution=resolution)

    def pixel_matrix(self) -> np.ndarray:
        """(2,3) linear map from world offsets to pixel offsets (v grows downward)."""
        w_px, h_px = self.resolution
        return np.stack([
            self.rotation[0] * (w_px / self.width),
            -self.rotation[1] * (h_px / self.height),
        ])


def project(gset: GaussianSet, camera: OrthoCamera):
    """Project kernels: returns (means_px (N,2), covs_px (N,2,2), depths (N,)).

    The 2D covariance is the view-plane block of the rotated 3D covariance
    R diag(exp(2s)) R^T, expressed in pixel units. Depth is the coordinate
    along the view axis (smaller = closer to the camera).
    """
    m = camera.pixel_matrix()
    offsets = gset.positions - camera.center
    w_px, h_px = camera.resolution
    means = offsets @ m.T + np.array([w_px / 2.0, h_px / 2.0])
    rot = quat_to_matrix(gset.rotations)
    scaled = rot * np.exp(gset.log_scales)[:, None, :]  # R diag(exp(s))
    cov3 = scaled @ scaled.transpose(0, 2, 1)
    mc = np.einsum("ab,nbc->nac", m, cov3)
    covs = np.einsum("nab,cb->nac", mc, m)
    depths = offsets @ camera.rotation[2]
    return means, covs, depths


@dataclass
class _Footprints:
    """Batched per-kernel pixel footprints (internal; shared with the mask energy)."""

    kept: np.ndarray  # (K,) original kernel indices
    skipped: int
    means: np.ndarray  # (K,2)
    inv_covs: np.ndarray  # (K,2,2)
    depths: np.ndarray  # (K,)
    pix_x: np.ndarray  # (K,P) int
    pix_y: np.ndarray  # (K,P) int
    valid: np.ndarray  # (K,P) bool
    g: np.ndarray  # (K,P) contribution, zero where invalid
    d: np.ndarray  # (K,P,2) pixel center minus mean
    pixel_matrix: np.ndarray  # (2,3)


def _footprints(gset: GaussianSet, camera: OrthoCamera, truncation_radius: float,
                opacity_ceiling: float = 1.0) -> _Footprints:
    if truncation_radius <= 0.0:
        raise InvalidArgumentError("truncation radius must be positive")
    means, covs, depths = project(gset, camera)
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    half_tr = 0.5 * (a + c)
    det = a * c - b * b
    disc = np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
    lam_max = half_tr + disc
    lam_min = half_tr - disc
    ok = (lam_min > 0.0) & (lam_max <= COND_LIMIT * lam_min)
    kept = np.nonzero(ok)[0]
    skipped = int(len(gset) - kept.size)

    w_px, h_px = camera.resolution
    if kept.size == 0:
        empty = np.zeros((0, 0))
        return _Footprints(kept=kept, skipped=skipped, means=means[kept], inv_covs=np.zeros((0, 2, 2)),
                           depths=depths[kept], pix_x=empty.astype(int), pix_y=empty.astype(int),
                           valid=empty.astype(bool), g=empty, d=np.zeros((0, 0, 2)),
                           pixel_matrix=camera.pixel_matrix())

    mu = means[kept]
    dep = depths[kept]
    det_k = det[kept]
    inv = np.empty((kept.size, 2, 2))
    inv[:, 0, 0] = covs[kept, 1, 1] / det_k
    inv[:, 1, 1] = covs[kept, 0, 0] / det_k
    inv[:, 0, 1] = inv[:, 1, 0] = -covs[kept, 0, 1] / det_k

    radius_px = truncation_radius * np.sqrt(lam_max[kept])
    half = np.ceil(radius_px + 0.5).astype(np.int64)
    half = np.minimum(half, max(w_px, h_px))  # no point windowing beyond the image
    hw = int(half.max()) if half.size else 0
    side = 2 * hw + 1
    offs = np.arange(-hw, hw + 1)
    ox, oy = np.meshgrid(offs, offs, indexing="xy")
    ox = ox.ravel()
    oy = oy.ravel()

    base_x = np.round(mu[:, 0] - 0.5).astype(np.int64)
    base_y = np.round(mu[:, 1] - 0.5).astype(np.int64)
    pix_x = base_x[:, None] + ox[None, :]
    pix_y = base_y[:, None] + oy[None, :]
    inside = (pix_x >= 0) & (pix_x < w_px) & (pix_y >= 0) & (pix_y < h_px)

    d = np.empty((kept.size, side * side, 2))
    d[:, :, 0] = pix_x + 0.5 - mu[:, 0:1]
    d[:, :, 1] = pix_y + 0.5 - mu[:, 1:2]
    qform = (
        inv[:, None, 0, 0] * d[:, :, 0] ** 2
        + 2.0 * inv[:, None, 0, 1] * d[:, :, 0] * d[:, :, 1]
        + inv[:, None, 1, 1] * d[:, :, 1] ** 2
    )
    opac = np.minimum(gset.opacities[kept], opacity_ceiling)
    valid = inside & (qform <= truncation_radius**2) & (opac[:, None] > 0.0)
    g = np.where(valid, opac[:, None] * np.exp(-0.5 * np.where(valid, qform, 0.0)), 0.0)
    return _Footprints(kept=kept, skipped=skipped, means=mu, inv_covs=inv, depths=dep,
                       pix_x=pix_x, pix_y=pix_y, valid=valid, g=g, d=d,
                       pixel_matrix=camera.pixel_matrix())


@dataclass
class RenderOutput:
    """Rendered images plus per-kernel footprints.

    ``footprints[i]`` is a (m,2) int array of (x, y) pixels and a (m,) array of
    contributions for kernel i (empty for skipped kernels); ``skipped`` counts
    kernels dropped for singular 2D covariance.
    """

    rgb: np.ndarray  # (H,W,3) in [0,1]
    alpha: np.ndarray  # (H,W) in [0,1]
    footprints: list
    skipped: int


def splat(gset: GaussianSet, camera: OrthoCamera, truncation_radius: float = 3.0) -> RenderOutput:
    """Soft-splat a set into color and coverage images.

    Coverage uses the order-independent product form alpha = 1 - prod(1 - g_i);
    color composites kernels sorted by depth (ties broken by kernel index),
    closer kernels occluding farther ones.
    """
    if gset.color_channels < 3:
        raise InvalidArgumentError("splat needs at least 3 color channels")
    w_px, h_px = camera.resolution
    fp = _footprints(gset, camera, truncation_radius)

    one_minus = np.ones((h_px, w_px))
    if fp.kept.size:
        v = fp.valid
        np.multiply.at(one_minus, (fp.pix_y[v], fp.pix_x[v]), 1.0 - fp.g[v])
    alpha = 1.0 - one_minus

    rgb = np.zeros((h_px, w_px, 3))
    transmittance = np.ones((h_px, w_px))
    order = np.argsort(fp.depths, kind="stable")
    colors = gset.colors[:, :3]
    for row in order:
        sel = fp.valid[row]
        if not np.any(sel):
            continue
        xs = fp.pix_x[row, sel]
        ys = fp.pix_y[row, sel]
        gi = fp.g[row, sel]
        t_here = transmittance[ys, xs]
        rgb[ys, xs] += (gi * t_here)[:, None] * colors[fp.kept[row]]
        transmittance[ys, xs] = t_here * (1.0 - gi)

    footprints: list = [
        (np.zeros((0, 2), dtype=np.int64), np.zeros(0)) for _ in range(len(gset))
    ]
    for row, kernel_index in enumerate(fp.kept):
        sel = fp.valid[row]
        pix = np.stack([fp.pix_x[row, sel], fp.pix_y[row, sel]], axis=1)
        footprints[int(kernel_index)] = (pix, fp.g[row, sel].copy())

    return RenderOutput(rgb=np.clip(rgb, 0.0, 1.0), alpha=alpha, footprints=footprints,
                        skipped=fp.skipped)
