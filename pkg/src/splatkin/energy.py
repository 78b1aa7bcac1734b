"""Differentiable energy terms driving every optimization loop.

Each term returns an EnergyEval carrying the scalar value plus analytic
gradients for the parameter blocks the term supports (None elsewhere).
Rotation gradients are taken with respect to raw 4-vector quaternions; the
normalization happening inside the rotation formula is part of the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    GaussianSet,
    NeighborGraph,
    PointCloud,
    quat_inverse,
    quat_multiply,
    quat_normalize,
    quat_normalize_jacobian,
    quat_right_multiply_matrix,
    quat_rotation_jacobian,
    quat_to_matrix,
)
from .errors import InvalidArgumentError
from .render import OrthoCamera, _footprints

# keeps the leave-one-out coverage gradient finite for fully opaque kernels
_OPACITY_CEILING = 1.0 - 1e-9


@dataclass
class EnergyEval:
    """Scalar energy plus per-block gradients (None where a term has no contract)."""

    value: float
    grad_p: np.ndarray | None = None  # (N,3) positions
    grad_q: np.ndarray | None = None  # (N,4) raw rotations
    grad_s: np.ndarray | None = None  # (N,3) log-scales
    grad_o: np.ndarray | None = None  # (N,) opacities
    grad_c: np.ndarray | None = None  # (N,C) colors


def e_arap(prev: GaussianSet, cur: GaussianSet, graph: NeighborGraph) -> EnergyEval:
    """As-rigid-as-possible deformation energy between consecutive states.

    sum_i sum_{k in N(i)} w_ik | R(q_i,cur q_i,prev^-1)(p_k,prev - p_i,prev)
    - (p_k,cur - p_i,cur) |^2 with the raw RBF weights carried by ``graph``
    (built once from canonical positions). Gradients cover current positions
    and raw current rotations; the previous state is a constant.
    """
    n = len(cur)
    if len(prev) != n:
        raise InvalidArgumentError(f"kernel counts differ: {len(prev)} vs {n}")
    if len(graph) != n:
        raise InvalidArgumentError("graph was not built for these sets")
    if graph.indices.size and graph.indices.max() >= n:
        raise InvalidArgumentError("graph references kernels beyond the set")

    prev_inv = quat_inverse(prev.rotations)
    q_raw = quat_multiply(cur.rotations, prev_inv)
    q_hat = quat_normalize(q_raw)
    delta_rot = quat_to_matrix(q_hat)

    idx = graph.indices
    w = graph.weights
    a = prev.positions[idx] - prev.positions[:, None, :]  # (N,k,3)
    b = cur.positions[idx] - cur.positions[:, None, :]
    e = np.einsum("nij,nkj->nki", delta_rot, a) - b
    value = float(np.sum(w * np.sum(e * e, axis=2)))

    we = 2.0 * w[:, :, None] * e
    grad_p = np.sum(we, axis=1)
    np.add.at(grad_p, idx, -we)

    g_rot = np.einsum("nki,nkj->nij", we, a)  # dV/d(delta_rot)
    j_rot = quat_rotation_jacobian(q_hat)  # (N,4,3,3)
    grad_q_hat = np.einsum("nij,nqij->nq", g_rot, j_rot)
    proj = quat_normalize_jacobian(q_raw)  # (N,4,4)
    right = quat_right_multiply_matrix(prev_inv)  # q_raw = right @ q_cur
    grad_q = np.einsum("nq,nqr,nrs->ns", grad_q_hat, proj, right)
    return EnergyEval(value=value, grad_p=grad_p, grad_q=grad_q)


def e_iso(gset: GaussianSet, ratio_limit: float = 4.0) -> EnergyEval:
    """Mean ReLU penalty on per-kernel scale anisotropy.

    (1/N) sum_i ReLU(exp(max(s_i) - min(s_i)) - ratio_limit): zero whenever the
    longest axis stays within ratio_limit times the shortest.
    """
    if ratio_limit <= 0.0:
        raise InvalidArgumentError("ratio_limit must be positive")
    n = len(gset)
    if n == 0:
        raise InvalidArgumentError("empty set")
    s = gset.log_scales
    hi = np.argmax(s, axis=1)
    lo = np.argmin(s, axis=1)
    rows = np.arange(n)
    ratio = np.exp(s[rows, hi] - s[rows, lo])
    active = ratio > ratio_limit
    value = float(np.sum(np.where(active, ratio - ratio_limit, 0.0)) / n)
    grad_s = np.zeros_like(s)
    coeff = np.where(active, ratio, 0.0) / n
    np.add.at(grad_s, (rows, hi), coeff)
    np.add.at(grad_s, (rows, lo), -coeff)
    return EnergyEval(value=value, grad_s=grad_s)


def e_size(gset: GaussianSet, alpha: float = 2.0, frozen_mean=None) -> EnergyEval:
    """ReLU penalty on kernels outgrowing the population.

    sum over kernels and axes of ReLU(exp(s) - alpha * mean(exp(s))) where the
    per-axis mean is a stop-gradient: gradients flow through each kernel's own
    scale only. ``frozen_mean`` pins the mean explicitly, which is how the
    finite-difference oracle checks exactly these semantics.
    """
    if alpha <= 0.0:
        raise InvalidArgumentError("alpha must be positive")
    if len(gset) == 0:
        raise InvalidArgumentError("empty set")
    extents = np.exp(gset.log_scales)
    mean = extents.mean(axis=0) if frozen_mean is None else np.asarray(frozen_mean, dtype=np.float64)
    excess = extents - alpha * mean
    active = excess > 0.0
    value = float(np.sum(np.where(active, excess, 0.0)))
    grad_s = np.where(active, extents, 0.0)
    return EnergyEval(value=value, grad_s=grad_s)


def e_data_points(gset: GaussianSet, cloud: PointCloud) -> EnergyEval:
    """Symmetric colored-point chamfer data term.

    Mean over kernels of squared distance to the nearest target point plus the
    squared color difference at that match, plus mean over target points of
    squared distance to the nearest kernel. Nearest matches are by position
    only; gradients cover kernel positions and colors.
    """
    if len(gset) == 0 or len(cloud) == 0:
        raise InvalidArgumentError("data term needs a non-empty set and cloud")
    if gset.color_channels != cloud.colors.shape[1]:
        raise InvalidArgumentError(
            f"color channels differ: set {gset.color_channels} vs cloud {cloud.colors.shape[1]}"
        )
    n = len(gset)
    m = len(cloud)

    d_fwd, nn_fwd = cKDTree(cloud.points).query(gset.positions, k=1)
    dp = gset.positions - cloud.points[nn_fwd]
    dc = gset.colors - cloud.colors[nn_fwd]
    fwd = (np.sum(dp * dp, axis=1) + np.sum(dc * dc, axis=1)).sum() / n

    d_bwd, nn_bwd = cKDTree(gset.positions).query(cloud.points, k=1)
    bwd = float(np.sum(d_bwd * d_bwd)) / m

    grad_p = 2.0 * dp / n
    pull = 2.0 * (gset.positions[nn_bwd] - cloud.points) / m
    np.add.at(grad_p, nn_bwd, pull)
    grad_c = 2.0 * dc / n
    return EnergyEval(value=float(fwd + bwd), grad_p=grad_p, grad_c=grad_c)


def e_sem(gset: GaussianSet, target_centroids, clusters) -> EnergyEval:
    """Semantic centroid alignment: sum_j | mean(p[members_j]) - target_j |^2.

    ``clusters`` lists member-index arrays matched 1:1 with target centroids
    (already paired per label by the pipeline); targets are stop-gradient.
    """
    targets = np.ascontiguousarray(target_centroids, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != 3:
        raise InvalidArgumentError(f"target centroids must be (J,3), got {targets.shape}")
    if len(clusters) != targets.shape[0]:
        raise InvalidArgumentError("cluster count does not match target centroid count")
    if not np.all(np.isfinite(targets)):
        raise InvalidArgumentError("target centroids contain non-finite values")
    value = 0.0
    grad_p = np.zeros_like(gset.positions)
    for j, members in enumerate(clusters):
        members = np.asarray(members, dtype=np.int64)
        if members.size == 0:
            raise InvalidArgumentError(f"cluster {j} has no assigned kernels")
        delta = gset.positions[members].mean(axis=0) - targets[j]
        value += float(delta @ delta)
        grad_p[members] += 2.0 * delta / members.size
    return EnergyEval(value=value, grad_p=grad_p)


def e_mask(gset: GaussianSet, masks, cameras, truncation_radius: float = 3.0) -> EnergyEval:
    """L1 silhouette loss against target coverage images.

    sum over views and pixels of |alpha_hat(u) - mask(u)| with alpha_hat the
    product-form coverage of the soft splat. The per-pixel subgradient is
    sign(alpha_hat - mask); gradients cover positions and raw rotations,
    including the path through each kernel's 2D footprint covariance.
    """
    if len(masks) != len(cameras) or len(cameras) == 0:
        raise InvalidArgumentError("need one mask per camera, at least one view")
    value = 0.0
    grad_p = np.zeros_like(gset.positions)
    grad_q = np.zeros_like(gset.rotations)
    rot = quat_to_matrix(gset.rotations)
    ext_sq = np.exp(2.0 * gset.log_scales)
    proj_jac = quat_normalize_jacobian(gset.rotations)
    rot_jac = quat_rotation_jacobian(quat_normalize(gset.rotations))

    for mask, camera in zip(masks, cameras):
        mask = np.ascontiguousarray(mask, dtype=np.float64)
        w_px, h_px = camera.resolution
        if mask.shape != (h_px, w_px):
            raise InvalidArgumentError(
                f"mask shape {mask.shape} does not match camera resolution {(h_px, w_px)}"
            )
        fp = _footprints(gset, camera, truncation_radius, opacity_ceiling=_OPACITY_CEILING)
        one_minus = np.ones((h_px, w_px))
        if fp.kept.size:
            v = fp.valid
            np.multiply.at(one_minus, (fp.pix_y[v], fp.pix_x[v]), 1.0 - fp.g[v])
        alpha = 1.0 - one_minus
        resid = alpha - mask
        value += float(np.abs(resid).sum())
        if fp.kept.size == 0:
            continue

        sign = np.sign(resid)
        # leave-one-out factor per (kernel, pixel): prod_{j != i} (1 - g_j);
        # out-of-image entries are invalid and zeroed, clip only for the gather
        ys = np.clip(fp.pix_y, 0, h_px - 1)
        xs = np.clip(fp.pix_x, 0, w_px - 1)
        pix_sign = sign[ys, xs]
        pix_prod = one_minus[ys, xs]
        coeff = np.where(fp.valid, pix_sign * pix_prod / (1.0 - fp.g) * fp.g, 0.0)

        ad = np.einsum("kab,kpb->kpa", fp.inv_covs, fp.d)
        m = fp.pixel_matrix
        d_mu = np.einsum("kp,kpa->ka", coeff, ad)
        np.add.at(grad_p, fp.kept, d_mu @ m)

        b_cov = 0.5 * np.einsum("kp,kpa,kpb->kab", coeff, ad, ad)
        g3 = np.einsum("ba,kbc,cd->kad", m, b_cov, m)  # dL/d(3D covariance)
        g3rd = np.einsum("kab,kbc->kac", g3, rot[fp.kept]) * ext_sq[fp.kept][:, None, :]
        gq_hat = 2.0 * np.einsum("kqab,kab->kq", rot_jac[fp.kept], g3rd)
        np.add.at(grad_q, fp.kept, np.einsum("kq,kqr->kr", gq_hat, proj_jac[fp.kept]))

    return EnergyEval(value=value, grad_p=grad_p, grad_q=grad_q)


def e_l2_gauss(gset: GaussianSet, target: GaussianSet, positions: bool = True,
               rotations: bool = True) -> EnergyEval:
    """Mean squared difference to a target set over the selected channels.

    Rotations are hemisphere-aligned pairwise (target flipped when the dot
    product is negative) before differencing; gradients are with respect to
    the first argument.
    """
    if len(gset) != len(target):
        raise InvalidArgumentError(f"kernel counts differ: {len(gset)} vs {len(target)}")
    if not (positions or rotations):
        raise InvalidArgumentError("select at least one channel")
    n = len(gset)
    value = 0.0
    grad_p = None
    grad_q = None
    if positions:
        dp = gset.positions - target.positions
        value += float(np.sum(dp * dp)) / n
        grad_p = 2.0 * dp / n
    if rotations:
        dots = np.sum(gset.rotations * target.rotations, axis=1)
        flip = np.where(dots < 0.0, -1.0, 1.0)
        dq = gset.rotations - flip[:, None] * target.rotations
        value += float(np.sum(dq * dq)) / n
        grad_q = 2.0 * dq / n
    return EnergyEval(value=value, grad_p=grad_p, grad_q=grad_q)
