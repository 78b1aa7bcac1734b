"""Optimization loops: canonical fitting, tracking, alignment, motion transfer.

All four loops share the same skeleton — evaluate weighted energy terms,
record a trace row, keep the best parameters seen so far, take one Adam step —
and differ only in which terms and parameter blocks participate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    GaussianSet,
    NeighborGraph,
    PointCloud,
    Role,
    knn_build,
    quat_normalize,
)
from .energy import e_arap, e_data_points, e_iso, e_l2_gauss, e_mask, e_sem, e_size
from .errors import InvalidArgumentError
from .render import OrthoCamera, splat
from .warp import FrameMotion, warp_appearance

_BETA1 = 0.9
_BETA2 = 0.999
_EPS = 1e-8


class Adam(object):
    """Adam with bias correction and a per-group linearly decayed step size.

    Each parameter group owns its working array (mutated in place by
    ``step``), first/second moment buffers, and a learning-rate ramp from
    ``lr_start`` down to ``lr_end`` over ``total_steps``. Groups flagged
    ``unit_rows`` are row-normalized after every update (rotation
    quaternions). A ``None`` gradient leaves a group untouched.
    """

    def __init__(self, total_steps: int):
        if total_steps < 1:
            raise InvalidArgumentError("total_steps must be >= 1")
        self.total_steps = int(total_steps)
        self.t = 0
        self._groups: dict[str, dict] = {}

    def add_group(self, name: str, value: np.ndarray, lr_start: float,
                  lr_end: float | None = None, unit_rows: bool = False):
        if name in self._groups:
            raise InvalidArgumentError(f"duplicate parameter group {name!r}")
        if lr_start < 0.0:
            raise InvalidArgumentError(f"negative learning rate for group {name!r}")
        value = np.array(value, dtype=np.float64)
        self._groups[name] = {
            "value": value,
            "m": np.zeros_like(value),
            "v": np.zeros_like(value),
            "lr_start": float(lr_start),
            "lr_end": float(lr_start if lr_end is None else lr_end),
            "unit_rows": unit_rows,
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._groups[name]["value"]

    def _lr(self, group: dict) -> float:
        if self.total_steps == 1:
            return group["lr_start"]
        frac = (self.t - 1) / (self.total_steps - 1)
        return group["lr_start"] + (group["lr_end"] - group["lr_start"]) * frac

    def step(self, grads: dict):
        """One update; ``grads`` maps group name to array or None (skip)."""
        self.t += 1
        for name, g in grads.items():
            if g is None:
                continue
            if name not in self._groups:
                raise InvalidArgumentError(f"gradient for unknown group {name!r}")
            group = self._groups[name]
            g = np.asarray(g, dtype=np.float64)
            if g.shape != group["value"].shape:
                raise InvalidArgumentError(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{group['value'].shape} for group {name!r}")
            if not np.all(np.isfinite(g)):
                raise InvalidArgumentError(f"non-finite gradient for group {name!r}")
            group["m"] = _BETA1 * group["m"] + (1.0 - _BETA1) * g
            group["v"] = _BETA2 * group["v"] + (1.0 - _BETA2) * g * g
            m_hat = group["m"] / (1.0 - _BETA1**self.t)
            v_hat = group["v"] / (1.0 - _BETA2**self.t)
            group["value"] -= self._lr(group) * m_hat / (np.sqrt(v_hat) + _EPS)
            if group["unit_rows"]:
                group["value"][:] = quat_normalize(group["value"])


def kmeans(points: np.ndarray, k: int, seed,
           max_iter: int = 100, tol: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations with distance-weighted seeding.

    Deterministic given (points, k, seed): ties in the assignment go to the
    lowest centroid index, an emptied cluster is re-seeded at the point
    farthest from its current centroid, and iteration stops after
    ``max_iter`` rounds or when no centroid moves more than ``tol``.
    Returns (centroids (k,3), assignment (n,)).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise InvalidArgumentError(f"need 1 <= k <= {n}, got k={k}")
    rng = np.random.Generator(np.random.PCG64(seed))

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total))
            idx = min(idx, n - 1)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assignment = np.argmin(dist2, axis=1)  # ties -> lowest index
        moved = 0.0
        for j in range(k):
            members = points[assignment == j]
            if len(members) == 0:
                own = dist2[np.arange(n), assignment]
                new_c = points[int(np.argmax(own))]
            else:
                new_c = members.mean(axis=0)
            moved = max(moved, float(np.abs(new_c - centroids[j]).max()))
            centroids[j] = new_c
        if moved < tol:
            break
    dist2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assignment = np.argmin(dist2, axis=1)
    return centroids, assignment


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrackConfig:
    """Knobs for canonical fitting and per-frame tracking."""

    iterations_init: int = 2000
    iterations_track: int = 4000
    length_scale: float = 0.001
    lambda_iso: float = 0.004
    lambda_size: float = 1.0
    iso_ratio_limit: float = 4.0
    size_alpha: float = 2.0
    k_neighbors: int = 4
    lr_position: float = 1e-3
    lr_rotation: float = 1e-3
    lr_scale: float = 1e-3
    lr_opacity: float = 1e-3
    lr_color: float = 1e-3
    lr_end_factor: float = 0.1
    seed: int = 0


@dataclass
class TransferConfig:
    """Knobs for semantic alignment and motion transfer."""

    iterations_align: int = 15000
    iterations_transfer: int = 2000
    length_scale: float = 0.001
    lambda_sem: float = 0.001
    lambda_arap_align: float = 0.01
    lambda_arap_transfer: float = 0.2
    k_neighbors: int = 4
    clusters_per_label: int = 8
    truncation_radius: float = 3.0
    lr_position: float = 1e-3
    lr_rotation: float = 1e-3
    lr_end_factor: float = 0.1
    seed: int = 0


@dataclass
class Trace:
    """Per-iteration energy log; the last row re-evaluates the best iterate."""

    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def record(self, iteration: int, values) -> None:
        self.rows.append((iteration, *[float(v) for v in values]))


def _run_loop(adam: Adam, iterations: int, evaluate, columns: tuple[str, ...],
              post_step=None) -> tuple[dict, Trace]:
    """Shared optimize-and-trace skeleton.

    ``evaluate`` maps the Adam parameter view to (term_values, grads) where
    the last term value is the weighted total. Returns the best-so-far
    parameter snapshot and the trace (final row = best iterate, re-logged at
    index ``iterations``).
    """
    trace = Trace(columns=("iteration",) + columns)
    best_terms = None
    best_params = None
    for it in range(iterations):
        terms, grads = evaluate(adam)
        trace.record(it, terms)
        if best_terms is None or terms[-1] < best_terms[-1]:
            best_terms = terms
            best_params = {name: adam[name].copy() for name in grads}
        adam.step(grads)
        if post_step is not None:
            post_step(adam)
    trace.record(iterations, best_terms)
    return best_params, trace


# ---------------------------------------------------------------------------
# canonical fitting


def init_canonical(initial: GaussianSet, target: PointCloud,
                   cfg: TrackConfig) -> tuple[GaussianSet, Trace]:
    """Fit positions/rotations/scales/opacities/colors to a colored cloud.

    Minimizes the two-sided colored point match plus the spread and size
    penalties; opacities are clamped back into [0, 1] after every step.
    """
    adam = Adam(cfg.iterations_init)
    adam.add_group("positions", initial.positions, cfg.lr_position,
                   cfg.lr_position * cfg.lr_end_factor)
    adam.add_group("rotations", initial.rotations, cfg.lr_rotation,
                   cfg.lr_rotation * cfg.lr_end_factor, unit_rows=True)
    adam.add_group("log_scales", initial.log_scales, cfg.lr_scale,
                   cfg.lr_scale * cfg.lr_end_factor)
    adam.add_group("opacities", initial.opacities, cfg.lr_opacity,
                   cfg.lr_opacity * cfg.lr_end_factor)
    adam.add_group("colors", initial.colors, cfg.lr_color,
                   cfg.lr_color * cfg.lr_end_factor)

    def evaluate(a: Adam):
        cur = initial.replace(positions=a["positions"], rotations=a["rotations"],
                              log_scales=a["log_scales"],
                              opacities=np.clip(a["opacities"], 0.0, 1.0),
                              colors=a["colors"])
        data = e_data_points(cur, target)
        iso = e_iso(cur, cfg.iso_ratio_limit)
        size = e_size(cur, cfg.size_alpha)
        total = data.value + cfg.lambda_iso * iso.value + cfg.lambda_size * size.value
        grads = {
            "positions": data.grad_p,
            "rotations": None,
            "log_scales": cfg.lambda_iso * iso.grad_s + cfg.lambda_size * size.grad_s,
            "opacities": None,
            "colors": data.grad_c,
        }
        return (data.value, iso.value, size.value, total), grads

    def clamp(a: Adam):
        np.clip(a["opacities"], 0.0, 1.0, out=a["opacities"])

    best, trace = _run_loop(adam, cfg.iterations_init, evaluate,
                            ("e_data", "e_iso", "e_size", "total"), post_step=clamp)
    fitted = initial.replace(positions=best["positions"],
                             rotations=quat_normalize(best["rotations"]),
                             log_scales=best["log_scales"],
                             opacities=np.clip(best["opacities"], 0.0, 1.0),
                             colors=best["colors"])
    return fitted, trace


# ---------------------------------------------------------------------------
# frame-to-frame tracking


def track_sequence(canonical: GaussianSet, targets: list[PointCloud],
                   cfg: TrackConfig) -> tuple[list[GaussianSet], list[Trace]]:
    """Track a motion set through a sequence of colored target clouds.

    Each frame warm-starts from the previous result and minimizes the point
    match plus rigidity against the previous frame; only positions and
    rotations move. Returns per-frame sets (frame numbers 1..T) and traces.
    """
    if canonical.role is not Role.MOTION:
        raise InvalidArgumentError("tracking expects a motion-role set")
    graph = knn_build(canonical.positions, canonical.positions, cfg.k_neighbors,
                      cfg.length_scale, normalize=False)
    prev = canonical
    results: list[GaussianSet] = []
    traces: list[Trace] = []
    for t, cloud in enumerate(targets, start=1):
        adam = Adam(cfg.iterations_track)
        adam.add_group("positions", prev.positions, cfg.lr_position,
                       cfg.lr_position * cfg.lr_end_factor)
        adam.add_group("rotations", prev.rotations, cfg.lr_rotation,
                       cfg.lr_rotation * cfg.lr_end_factor, unit_rows=True)
        prev_frame = prev

        def evaluate(a: Adam):
            cur = prev_frame.replace(positions=a["positions"],
                                     rotations=a["rotations"], frame=t)
            data = e_data_points(cur, cloud)
            arap = e_arap(prev_frame, cur, graph)
            total = data.value + arap.value
            grads = {
                "positions": data.grad_p + arap.grad_p,
                "rotations": arap.grad_q,
            }
            return (data.value, arap.value, total), grads

        best, trace = _run_loop(adam, cfg.iterations_track, evaluate,
                                ("e_data", "e_arap", "total"))
        prev = prev_frame.replace(positions=best["positions"],
                                  rotations=quat_normalize(best["rotations"]),
                                  frame=t)
        results.append(prev)
        traces.append(trace)
    return results, traces


# ---------------------------------------------------------------------------
# semantic alignment


@dataclass
class SemanticClusters:
    """Greedy label-wise cluster matching between two labeled sets."""

    members: list[np.ndarray]
    targets: np.ndarray


def _label_indices(gset: GaussianSet, name: str) -> np.ndarray:
    label_id = gset.label_names.index(name)
    return np.flatnonzero(gset.labels == label_id)


def match_clusters(source: GaussianSet, driver: GaussianSet,
                   clusters_per_label: int, seed: int) -> SemanticClusters:
    """Cluster both sets per shared label and pair clusters greedily.

    Centroids are compared after removing each label's mean (so the pairing
    reflects intra-part layout, not a global offset between the two bodies);
    pairs are chosen by ascending centered distance with index tie-breaks.
    The returned targets live in the driver's actual coordinates.
    """
    if source.labels is None or driver.labels is None:
        raise InvalidArgumentError("semantic alignment needs labels on both sets")
    shared = sorted(set(source.label_names) & set(driver.label_names))
    if not shared:
        raise InvalidArgumentError("no shared label names between the two sets")
    member_lists: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    for li, name in enumerate(shared):
        src_idx = _label_indices(source, name)
        drv_idx = _label_indices(driver, name)
        if len(src_idx) == 0 or len(drv_idx) == 0:
            continue
        k = min(clusters_per_label, len(src_idx), len(drv_idx))
        # same derived seed on both sides: identical geometry then yields
        # identical clusterings, making self-alignment exactly stationary
        _, src_assign = kmeans(source.positions[src_idx], k, seed=(seed, li))
        _, drv_assign = kmeans(driver.positions[drv_idx], k, seed=(seed, li))
        # centroids as member means under the final assignment: exactly the
        # quantity the semantic term measures
        src_valid = [i for i in range(k) if np.any(src_assign == i)]
        drv_valid = [j for j in range(k) if np.any(drv_assign == j)]
        src_c = np.stack([source.positions[src_idx[src_assign == i]].mean(axis=0)
                          for i in src_valid])
        drv_c = np.stack([driver.positions[drv_idx[drv_assign == j]].mean(axis=0)
                          for j in drv_valid])
        src_centered = src_c - src_c.mean(axis=0)
        drv_centered = drv_c - drv_c.mean(axis=0)
        drv_offset = drv_c.mean(axis=0)
        dist = np.linalg.norm(src_centered[:, None, :] - drv_centered[None, :, :], axis=2)
        order = sorted(((dist[a, b], a, b)
                        for a in range(len(src_valid)) for b in range(len(drv_valid))))
        used_a: set[int] = set()
        used_b: set[int] = set()
        for _, a, b in order:
            if a in used_a or b in used_b:
                continue
            used_a.add(a)
            used_b.add(b)
            member_lists.append(src_idx[src_assign == src_valid[a]])
            targets.append(drv_centered[b] + drv_offset)
    return SemanticClusters(members=member_lists, targets=np.asarray(targets))


def align_canonical(source: GaussianSet, driver: GaussianSet,
                    cameras: list[OrthoCamera], cfg: TransferConfig,
                    truncation_radius: float | None = None,
                    ) -> tuple[GaussianSet, Trace]:
    """Deform the source appearance set into the driver's canonical pose.

    The driver is rendered once per camera into silhouette masks; the loop
    then moves source positions/rotations to minimize silhouette mismatch,
    matched-cluster centroid distance, and rigidity against the original
    source (which anchors local shape while the body moves globally).
    """
    radius = cfg.truncation_radius if truncation_radius is None else truncation_radius
    masks = [splat(driver, cam, truncation_radius=radius).alpha for cam in cameras]
    clusters = match_clusters(source, driver, cfg.clusters_per_label, cfg.seed)
    graph = knn_build(source.positions, source.positions, cfg.k_neighbors,
                      cfg.length_scale, normalize=False)

    adam = Adam(cfg.iterations_align)
    adam.add_group("positions", source.positions, cfg.lr_position,
                   cfg.lr_position * cfg.lr_end_factor)
    adam.add_group("rotations", source.rotations, cfg.lr_rotation,
                   cfg.lr_rotation * cfg.lr_end_factor, unit_rows=True)

    def evaluate(a: Adam):
        cur = source.replace(positions=a["positions"], rotations=a["rotations"])
        mask = e_mask(cur, masks, cameras, truncation_radius=radius)
        sem = e_sem(cur, clusters.targets, clusters.members)
        arap = e_arap(source, cur, graph)
        total = (mask.value + cfg.lambda_sem * sem.value
                 + cfg.lambda_arap_align * arap.value)
        grads = {
            "positions": (mask.grad_p + cfg.lambda_sem * sem.grad_p
                          + cfg.lambda_arap_align * arap.grad_p),
            "rotations": mask.grad_q + cfg.lambda_arap_align * arap.grad_q,
        }
        return (mask.value, sem.value, arap.value, total), grads

    best, trace = _run_loop(adam, cfg.iterations_align, evaluate,
                            ("e_mask", "e_sem", "e_arap", "total"))
    aligned = source.replace(positions=best["positions"],
                             rotations=quat_normalize(best["rotations"]))
    return aligned, trace


# ---------------------------------------------------------------------------
# motion transfer


def transfer_motion(aligned: GaussianSet, source_canonical: GaussianSet,
                    driver_canonical: GaussianSet, motions: list[FrameMotion],
                    cfg: TransferConfig) -> tuple[list[GaussianSet], list[Trace]]:
    """Re-perform driver motion on the aligned source appearance set.

    Every frame starts at the skinned warp of the aligned set under the
    driver's transforms and is then refined to stay close to that warp while
    keeping local rigidity against the *source* canonical geometry, so the
    result moves like the driver but deforms like the source.
    """
    if len(aligned) != len(source_canonical):
        raise InvalidArgumentError("aligned and source canonical sets differ in size")
    skin = knn_build(aligned.positions, driver_canonical.positions,
                     cfg.k_neighbors, cfg.length_scale, normalize=True)
    rigid = knn_build(source_canonical.positions, source_canonical.positions,
                      cfg.k_neighbors, cfg.length_scale, normalize=False)
    results: list[GaussianSet] = []
    traces: list[Trace] = []
    for fm in motions:
        target = warp_appearance(aligned, fm, skin)
        adam = Adam(cfg.iterations_transfer)
        adam.add_group("positions", target.positions, cfg.lr_position,
                       cfg.lr_position * cfg.lr_end_factor)
        adam.add_group("rotations", target.rotations, cfg.lr_rotation,
                       cfg.lr_rotation * cfg.lr_end_factor, unit_rows=True)

        def evaluate(a: Adam, target=target):
            cur = target.replace(positions=a["positions"], rotations=a["rotations"])
            track = e_l2_gauss(cur, target)
            arap = e_arap(source_canonical, cur, rigid)
            total = track.value + cfg.lambda_arap_transfer * arap.value
            grads = {
                "positions": track.grad_p + cfg.lambda_arap_transfer * arap.grad_p,
                "rotations": track.grad_q + cfg.lambda_arap_transfer * arap.grad_q,
            }
            return (track.value, arap.value, total), grads

        best, trace = _run_loop(adam, cfg.iterations_transfer, evaluate,
                                ("e_l2", "e_arap", "total"))
        results.append(target.replace(positions=best["positions"],
                                      rotations=quat_normalize(best["rotations"]),
                                      frame=fm.frame))
        traces.append(trace)
    return results, traces
