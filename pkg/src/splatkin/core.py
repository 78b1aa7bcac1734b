"""Core primitives: Gaussian kernels and sets, quaternion algebra, RBF kNN graphs.

Quaternions are stored (w, x, y, z). Scales are stored in log space and
exponentiated wherever an actual extent is needed. Sets are immutable after
construction; optimization loops derive new sets via ``GaussianSet.replace``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateBlendError, InvalidArgumentError

# Below this norm a quaternion (or a blend of quaternions) is treated as degenerate.
DEGENERATE_NORM = 1e-9


class Role(Enum):
    """What a set is for: sparse motion scaffolding or dense appearance."""

    MOTION = "motion"
    APPEARANCE = "appearance"


def _float_array(values, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    # freeze a view so the caller's buffer stays writeable
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class GaussianKernel:
    """A single splat. ``log_scale`` holds per-axis log extents."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity: float
    color: np.ndarray
    label: int | None = None


@dataclass
class GaussianSet:
    """An ordered collection of Gaussian kernels; order defines kernel identity.

    Field arrays are per-kernel rows: positions (N,3), rotations (N,4),
    log_scales (N,3), opacities (N,), colors (N,C). ``labels`` is an optional
    (N,) int array indexing into ``label_names``.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    role: Role
    frame: int = 0
    labels: np.ndarray | None = None
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.positions = _float_array(self.positions, "positions")
        self.rotations = _float_array(self.rotations, "rotations")
        self.log_scales = _float_array(self.log_scales, "log_scales")
        self.opacities = _float_array(self.opacities, "opacities")
        self.colors = _float_array(self.colors, "colors")
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise InvalidArgumentError(f"positions must be (N,3), got {self.positions.shape}")
        if self.rotations.shape != (n, 4):
            raise InvalidArgumentError(f"rotations must be (N,4), got {self.rotations.shape}")
        if self.log_scales.shape != (n, 3):
            raise InvalidArgumentError(f"log_scales must be (N,3), got {self.log_scales.shape}")
        if self.opacities.shape != (n,):
            raise InvalidArgumentError(f"opacities must be (N,), got {self.opacities.shape}")
        if self.colors.ndim != 2 or self.colors.shape[0] != n:
            raise InvalidArgumentError(f"colors must be (N,C), got {self.colors.shape}")
        if np.any(self.opacities < 0.0) or np.any(self.opacities > 1.0):
            raise InvalidArgumentError("opacities must lie in [0, 1]")
        norms = np.linalg.norm(self.rotations, axis=1)
        if n and norms.min() <= DEGENERATE_NORM:
            raise InvalidArgumentError("rotations contain a (near) zero-norm quaternion")
        if not isinstance(self.role, Role):
            raise InvalidArgumentError(f"role must be a Role, got {self.role!r}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise InvalidArgumentError(f"labels must be (N,), got {self.labels.shape}")
            self.labels = _frozen(self.labels)
        self.positions = _frozen(self.positions)
        self.rotations = _frozen(self.rotations)
        self.log_scales = _frozen(self.log_scales)
        self.opacities = _frozen(self.opacities)
        self.colors = _frozen(self.colors)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def color_channels(self) -> int:
        return self.colors.shape[1]

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            label=None if self.labels is None else int(self.labels[i]),
        )

    def replace(self, **kwargs) -> "GaussianSet":
        """Build a new set with some fields swapped out (arrays are re-validated)."""
        fields = dict(
            positions=self.positions,
            rotations=self.rotations,
            log_scales=self.log_scales,
            opacities=self.opacities,
            colors=self.colors,
            role=self.role,
            frame=self.frame,
            labels=self.labels,
            label_names=self.label_names,
        )
        fields.update(kwargs)
        return GaussianSet(**fields)


@dataclass
class PointCloud:
    """A colored point cloud used as a per-frame data-term target."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = _float_array(self.points, "points")
        self.colors = _float_array(self.colors, "colors")
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidArgumentError(f"points must be (M,3), got {self.points.shape}")
        if self.colors.ndim != 2 or self.colors.shape[0] != self.points.shape[0]:
            raise InvalidArgumentError("colors must be (M,C) matching points")
        _frozen(self.points)
        _frozen(self.colors)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborGraph:
    """Fixed kNN topology with RBF edge weights, built once on canonical positions."""

    k: int
    indices: np.ndarray  # (N,k) into the reference set
    weights: np.ndarray  # (N,k), raw RBF values or normalized to sum 1 per row
    normalized: bool

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.weights = _float_array(self.weights, "weights")
        if self.indices.shape != self.weights.shape or self.indices.ndim != 2:
            raise InvalidArgumentError("indices and weights must share shape (N,k)")
        if self.indices.shape[1] != self.k:
            raise InvalidArgumentError(f"k={self.k} does not match indices shape {self.indices.shape}")
        _frozen(self.indices)
        _frozen(self.weights)

    def __len__(self) -> int:
        return self.indices.shape[0]


# ---------------------------------------------------------------------------
# quaternion algebra


def quat_normalize(q) -> np.ndarray:
    """Normalize to unit norm; raises on (near) zero input."""
    q = _float_array(q, "quaternion")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= DEGENERATE_NORM):
        raise InvalidArgumentError("cannot normalize a zero-norm quaternion")
    return q / norm


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product, broadcasting over leading dimensions."""
    q1 = _float_array(q1, "q1")
    q2 = _float_array(q2, "q2")
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_inverse(q) -> np.ndarray:
    """General inverse conj(q)/|q|^2; equals the conjugate for unit input."""
    q = _float_array(q, "quaternion")
    norm_sq = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(norm_sq <= DEGENERATE_NORM**2):
        raise InvalidArgumentError("cannot invert a zero-norm quaternion")
    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    return conj / norm_sq


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of the normalized quaternion; batch-aware ((...,4) -> (...,3,3))."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q, v) -> np.ndarray:
    """Rotate 3-vectors by the normalized quaternion."""
    rot = quat_to_matrix(q)
    v = _float_array(v, "vector")
    return np.einsum("...ij,...j->...i", rot, v)


def quat_rotation_jacobian(q_unit) -> np.ndarray:
    """d R / d q-hat for a UNIT quaternion, shape (...,4,3,3).

    Component order matches (w, x, y, z); callers chain through the
    normalization projection themselves (see ``quat_normalize_jacobian``).
    """
    q = _float_array(q_unit, "quaternion")
    w, x, y, z = np.moveaxis(q, -1, 0)
    zero = np.zeros_like(w)

    def m(r00, r01, r02, r10, r11, r12, r20, r21, r22):
        return np.stack(
            [
                np.stack([r00, r01, r02], axis=-1),
                np.stack([r10, r11, r12], axis=-1),
                np.stack([r20, r21, r22], axis=-1),
            ],
            axis=-2,
        )

    jw = m(zero, -z, y, z, zero, -x, -y, x, zero)
    jx = m(zero, y, z, y, -2 * x, -w, z, w, -2 * x)
    jy = m(-2 * y, x, w, x, zero, z, -w, z, -2 * y)
    jz = m(-2 * z, -w, x, w, -2 * z, y, x, y, zero)
    return 2.0 * np.stack([jw, jx, jy, jz], axis=-3)


def quat_normalize_jacobian(q_raw) -> np.ndarray:
    """d q-hat / d q for a raw quaternion: (I - q q^T)/|q|, shape (...,4,4)."""
    q = _float_array(q_raw, "quaternion")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= DEGENERATE_NORM):
        raise InvalidArgumentError("cannot normalize a zero-norm quaternion")
    unit = q / norm
    eye = np.broadcast_to(np.eye(4), q.shape[:-1] + (4, 4))
    outer = unit[..., :, None] * unit[..., None, :]
    return (eye - outer) / norm[..., None]


def quat_right_multiply_matrix(r) -> np.ndarray:
    """Matrix M with q (x) r == M @ q (Hamilton product as a linear map in q)."""
    r = _float_array(r, "quaternion")
    rw, rx, ry, rz = np.moveaxis(r, -1, 0)
    rows = [
        np.stack([rw, -rx, -ry, -rz], axis=-1),
        np.stack([rx, rw, rz, -ry], axis=-1),
        np.stack([ry, -rz, rw, rx], axis=-1),
        np.stack([rz, ry, -rx, rw], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_blend(quats, weights) -> np.ndarray:
    """Weighted quaternion blend: hemisphere-align to the first entry, sum, normalize.

    This is the k-ary generalization of slerp used for skinning; weights must
    sum to 1 within 1e-6. Raises DegenerateBlendError when the weighted sum
    collapses below norm 1e-9 (antipodal cancellation).
    """
    quats = _float_array(quats, "quaternions")
    weights = _float_array(weights, "weights")
    if quats.ndim != 2 or quats.shape[1] != 4 or quats.shape[0] == 0:
        raise InvalidArgumentError(f"quats must be (k,4) with k >= 1, got {quats.shape}")
    if weights.shape != (quats.shape[0],):
        raise InvalidArgumentError("weights must match quaternion count")
    if abs(float(weights.sum()) - 1.0) > 1e-6:
        raise InvalidArgumentError("blend weights must sum to 1 within 1e-6")
    signs = np.where(quats @ quats[0] < 0.0, -1.0, 1.0)
    blended = (weights * signs) @ quats
    norm = np.linalg.norm(blended)
    if norm <= DEGENERATE_NORM:
        raise DegenerateBlendError("quaternion blend collapsed to zero norm")
    return blended / norm


def quat_blend_many(quats, weights) -> np.ndarray:
    """Row-wise ``quat_blend`` over (N,k,4) stacks; errors name the failing row."""
    quats = _float_array(quats, "quaternions")
    weights = _float_array(weights, "weights")
    if quats.ndim != 3 or quats.shape[2] != 4 or weights.shape != quats.shape[:2]:
        raise InvalidArgumentError("expected quats (N,k,4) and weights (N,k)")
    sums = weights.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise InvalidArgumentError(f"blend weights for kernel {int(bad[0])} do not sum to 1")
    dots = np.einsum("nkc,nc->nk", quats, quats[:, 0])
    signs = np.where(dots < 0.0, -1.0, 1.0)
    blended = np.einsum("nk,nkc->nc", weights * signs, quats)
    norms = np.linalg.norm(blended, axis=1)
    bad = np.nonzero(norms <= DEGENERATE_NORM)[0]
    if bad.size:
        raise DegenerateBlendError(f"quaternion blend degenerate for kernel {int(bad[0])}")
    return blended / norms[:, None]


# ---------------------------------------------------------------------------
# RBF weights and kNN graphs


def weight_rbf(p_i, p_j, length_scale: float) -> np.ndarray:
    """exp(-|p_i - p_j|^2 / length_scale^2); result lies in (0, 1]."""
    if not (np.isfinite(length_scale) and length_scale > 0.0):
        raise InvalidArgumentError(f"length_scale must be positive, got {length_scale}")
    p_i = _float_array(p_i, "p_i")
    p_j = _float_array(p_j, "p_j")
    d2 = np.sum((p_i - p_j) ** 2, axis=-1)
    return np.exp(-d2 / length_scale**2)


def knn_build(
    query: np.ndarray,
    reference: np.ndarray,
    k: int,
    length_scale: float,
    normalize: bool,
    chunk: int = 1024,
) -> NeighborGraph:
    """Exact k nearest neighbors with RBF weights.

    Ties in distance are broken toward the lower reference index (stable sort
    on squared distance). Normalized weights are computed with max-shifted
    exponentials, which is algebraically the same as dividing raw RBF values
    by their sum but never underflows for small length scales.
    """
    query = _float_array(query, "query")
    reference = _float_array(reference, "reference")
    if query.ndim != 2 or query.shape[1] != 3:
        raise InvalidArgumentError(f"query must be (N,3), got {query.shape}")
    if reference.ndim != 2 or reference.shape[1] != 3:
        raise InvalidArgumentError(f"reference must be (M,3), got {reference.shape}")
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if k > reference.shape[0]:
        raise InvalidArgumentError(f"k={k} exceeds reference size {reference.shape[0]}")
    if not (np.isfinite(length_scale) and length_scale > 0.0):
        raise InvalidArgumentError(f"length_scale must be positive, got {length_scale}")

    n = query.shape[0]
    indices = np.empty((n, k), dtype=np.int64)
    d2_sel = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, chunk):
        block = query[start : start + chunk]
        d2 = np.sum((block[:, None, :] - reference[None, :, :]) ** 2, axis=2)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        indices[start : start + block.shape[0]] = order
        d2_sel[start : start + block.shape[0]] = np.take_along_axis(d2, order, axis=1)

    inv_l2 = 1.0 / length_scale**2
    if normalize:
        shifted = np.exp(-(d2_sel - d2_sel.min(axis=1, keepdims=True)) * inv_l2)
        weights = shifted / shifted.sum(axis=1, keepdims=True)
    else:
        weights = np.exp(-d2_sel * inv_l2)
    return NeighborGraph(k=k, indices=indices, weights=weights, normalized=normalize)
