"""Correspondence-free multi-frame bundle adjustment.

The objective is the sum of kernel-space inner products over pose-graph
edges. Freezing the per-pair kernel weights at the current poses turns its
stationarity condition into a weighted least-squares problem, solved by
damped Gauss-Newton over all non-gauge poses; weights are refreshed after
every accepted step. An outer loop decays each edge's lengthscale
coarse-to-fine while the inner loop updates poses at the current scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rkhsreg.kernels import (
    Frame,
    KernelParams,
    LengthscaleSchedule,
    inner_product,
    pair_set,
    step_ell,
)
from rkhsreg.se3 import Pose, Twist, exp_se3, skew

# Levi-Civita tensor, used to contract skew(x) Q skew(z) sums against the
# weighted cross-moment matrix.
_EPS3 = np.zeros((3, 3, 3))
_EPS3[0, 1, 2] = _EPS3[1, 2, 0] = _EPS3[2, 0, 1] = 1.0
_EPS3[0, 2, 1] = _EPS3[2, 1, 0] = _EPS3[1, 0, 2] = -1.0

_MAX_DAMPING_RETRIES = 8


class UnderconstrainedFrameError(RuntimeError):
    """A non-gauge frame has no residual support, leaving its pose free."""

    def __init__(self, frame_id: int):
        super().__init__(
            f"frame {frame_id} has no kernel support on any incident edge; "
            "its pose is unconstrained"
        )
        self.frame_id = frame_id


@dataclass
class Edge:
    """Pose-graph edge between frames m and n with its own lengthscale state.

    ell_state None means "not yet initialized"; optimize() fills it from the
    schedule and original_cost falls back to the params lengthscale.
    """

    m: int
    n: int
    ell_state: Optional[float] = None


@dataclass
class PoseGraph:
    """Frames, covisibility edges, and the working pose estimates.

    poses is the solver's working state, seeded from the frames' own pose
    fields; frames themselves are never mutated. The gauge frame's pose is
    held fixed by every solver operation.
    """

    frames: list
    edges: list
    gauge_frame: int
    poses: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate frame ids in pose graph")
        known = set(ids)
        if self.gauge_frame not in known:
            raise ValueError(f"gauge frame {self.gauge_frame} not in graph")
        for e in self.edges:
            if e.m == e.n:
                raise ValueError(f"self-edge on frame {e.m}")
            if e.m not in known or e.n not in known:
                raise ValueError(f"edge ({e.m}, {e.n}) references unknown frame")
        if not self.poses:
            self.poses = {f.id: f.pose for f in self.frames}
        self._check_connected()

    def _check_connected(self):
        ids = [f.id for f in self.frames]
        parent = {i: i for i in ids}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for e in self.edges:
            parent[find(e.m)] = find(e.n)
        roots = {find(i) for i in ids}
        if len(roots) > 1:
            raise ValueError("pose graph restricted to its frames is not connected")

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(frame_id)


@dataclass
class BAConfig:
    max_outer_iterations: int = 40
    max_inner_iterations: int = 60
    damping_init: float = 1e-6
    inner_tol: float = 1e-9
    outer_tol: float = 1e-8
    # Inner loop also stops once the per-frame objective gradient falls below
    # this norm; keeps stationarity certifiable independently of step sizes.
    gradient_tol: float = 1e-6
    # Final stationarity polish steps after the outer loop; 0 disables. Near
    # the optimum, objective gains drop below the objective's floating-point
    # comparison resolution, so these steps accept on gradient-norm decrease
    # instead (weights still refreshed every step).
    polish_iterations: int = 12

    def __post_init__(self):
        for name in ("max_outer_iterations", "max_inner_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("damping_init", "inner_tol", "outer_tol", "gradient_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass
class IRLSStats:
    """Outcome of one reweighted Gauss-Newton step."""

    cost_before: float
    cost_after: float
    accepted: bool
    update_norm: float
    gradient_norm: float
    max_weight: float
    n_pairs: int
    damping: float
    retries: int


@dataclass
class BAResult:
    poses: dict
    objective_trace: list
    converged: bool
    outer_iterations: int
    max_weight_seen: float
    weights_finite: bool
    final_gradient_norm: float


def _edge_params(params: KernelParams, edge: Edge) -> KernelParams:
    return params.with_ell(edge.ell_state) if edge.ell_state is not None else params


def original_cost(graph: PoseGraph, params: KernelParams) -> float:
    """Sum of inner products over all edges at the graph's current poses,
    each edge evaluated at its own lengthscale state."""
    total = 0.0
    for e in graph.edges:
        fm, fn = graph.frame(e.m), graph.frame(e.n)
        t_rel = graph.poses[e.m].inverse().compose(graph.poses[e.n])
        total += inner_product(fm, fn, t_rel, _edge_params(params, e))
    return total


def _edge_pairs(graph: PoseGraph, e: Edge, params: KernelParams):
    fm, fn = graph.frame(e.m), graph.frame(e.n)
    t_m, t_n = graph.poses[e.m], graph.poses[e.n]
    p = _edge_params(params, e)
    pairs = pair_set(fm, fn, t_m.inverse().compose(t_n), p)
    return fm, fn, t_m, t_n, p, pairs


def original_cost_gradient(graph: PoseGraph, params: KernelParams) -> dict:
    """Analytic gradient of the objective with respect to a right
    perturbation of each frame pose, assembled per edge from the pair terms.

    The gauge frame's entry is reported too (useful for diagnostics) but is
    never used to update the gauge.
    """
    grads = {f.id: np.zeros(6) for f in graph.frames}
    for e in graph.edges:
        fm, fn, t_m, t_n, p, pairs = _edge_pairs(graph, e, params)
        if not len(pairs):
            continue
        w = pairs.c * pairs.h
        inv_ell2 = 1.0 / p.ell**2
        # Residual in world coordinates: r = T_m x_i - T_n z_j. pair_set's
        # diff is x_i - T_rel z_j in frame-m coordinates, so r = R_m diff.
        u_m = pairs.diff  # R_m^T r
        x = fm.positions[pairs.i]
        z = fn.positions[pairs.j]
        grads[e.m][:3] += -inv_ell2 * (w @ u_m)
        grads[e.m][3:] += -inv_ell2 * (w @ np.cross(x, u_m))
        # For frame n: J_n^T r with u_n = R_n^T r = T_rel's rotation applied
        # back; r = R_m diff so u_n = R_n^T R_m diff.
        q = t_n.rotation.matrix.T @ t_m.rotation.matrix
        u_n = pairs.diff @ q.T
        grads[e.n][:3] += inv_ell2 * (w @ u_n)
        grads[e.n][3:] += inv_ell2 * (w @ np.cross(z, u_n))
    return grads


@dataclass
class _FrozenEdge:
    """One edge's pair support with weights frozen at the current poses."""

    m: int
    n: int
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray  # c * h / ell^2 per pair
    wsum: float


def _freeze_edges(graph: PoseGraph, params: KernelParams):
    frozen = []
    max_weight = 0.0
    weights_finite = True
    n_pairs = 0
    for e in graph.edges:
        fm, fn, t_m, t_n, p, pairs = _edge_pairs(graph, e, params)
        if not len(pairs):
            continue
        w_raw = pairs.c * pairs.h
        max_weight = max(max_weight, float(w_raw.max()))
        weights_finite = weights_finite and bool(np.all(np.isfinite(w_raw)))
        w = w_raw / p.ell**2
        n_pairs += len(w)
        frozen.append(
            _FrozenEdge(
                e.m,
                e.n,
                fm.positions[pairs.i],
                fn.positions[pairs.j],
                w,
                float(w.sum()),
            )
        )
    return frozen, max_weight, weights_finite, n_pairs


def _ls_cost(poses: dict, frozen: list) -> float:
    total = 0.0
    for fe in frozen:
        r = poses[fe.m].apply(fe.x) - poses[fe.n].apply(fe.z)
        total += 0.5 * float(fe.w @ np.einsum("ij,ij->i", r, r))
    return total


def _assemble_normal_equations(poses: dict, frozen: list, order: dict):
    """Weighted Gauss-Newton normal equations at frozen weights.

    Each edge's 1/ell^2 is folded into its weights, so the right-hand side
    equals the objective gradient exactly and IRLS fixed points are
    stationary points of the objective even with per-edge lengthscales.
    """
    nvar = len(order)
    h = np.zeros((6 * nvar, 6 * nvar))
    g = np.zeros(6 * nvar)
    for fe in frozen:
        w, x, z = fe.w, fe.x, fe.z
        t_m, t_n = poses[fe.m], poses[fe.n]
        wsum = fe.wsum
        wx = w @ x
        wz = w @ z
        sxx = (w[:, None] * x).T @ x
        szz = (w[:, None] * z).T @ z
        cxz = (w[:, None] * x).T @ z
        q = t_m.rotation.matrix.T @ t_n.rotation.matrix

        blk_mm = np.zeros((6, 6))
        blk_mm[:3, :3] = wsum * np.eye(3)
        blk_mm[:3, 3:] = -skew(wx)
        blk_mm[3:, :3] = skew(wx)
        blk_mm[3:, 3:] = np.trace(sxx) * np.eye(3) - sxx

        blk_nn = np.zeros((6, 6))
        blk_nn[:3, :3] = wsum * np.eye(3)
        blk_nn[:3, 3:] = -skew(wz)
        blk_nn[3:, :3] = skew(wz)
        blk_nn[3:, 3:] = np.trace(szz) * np.eye(3) - szz

        # J_m^T J_n with Q = R_m^T R_n; the rotation-rotation block contracts
        # skew(x) Q skew(z) against the weighted cross moments.
        blk_mn = np.zeros((6, 6))
        blk_mn[:3, :3] = wsum * q
        blk_mn[:3, 3:] = -q @ skew(wz)
        blk_mn[3:, :3] = skew(wx) @ q
        blk_mn[3:, 3:] = -np.einsum("ijk,km,mln,jn->il", _EPS3, q, _EPS3, cxz)

        # Residual r = T_m x - T_n z expressed in each body frame.
        r = t_m.apply(x) - t_n.apply(z)
        u_m = r @ t_m.rotation.matrix
        u_n = r @ t_n.rotation.matrix
        g_m = np.concatenate([w @ u_m, w @ np.cross(x, u_m)])
        g_n = -np.concatenate([w @ u_n, w @ np.cross(z, u_n)])

        im = order.get(fe.m)
        i_n = order.get(fe.n)
        if im is not None:
            sm = slice(6 * im, 6 * im + 6)
            h[sm, sm] += blk_mm
            g[sm] += g_m
        if i_n is not None:
            sn = slice(6 * i_n, 6 * i_n + 6)
            h[sn, sn] += blk_nn
            g[sn] += g_n
        if im is not None and i_n is not None:
            sm = slice(6 * im, 6 * im + 6)
            sn = slice(6 * i_n, 6 * i_n + 6)
            h[sm, sn] += -blk_mn
            h[sn, sm] += -blk_mn.T
    return h, g


def _minimize_frozen_ls(
    poses: dict, frozen: list, order: dict, damping: float, max_iters: int = 25
):
    """Damped Gauss-Newton descent of the frozen-weight least squares,
    reusing the fixed pair support (no kernel re-evaluation).

    The entry damping acts as a proximal floor: it bounds how far the
    descent can travel from the entry poses, so escalating it on rejection
    genuinely shrinks the proposed move. Returns the minimizing poses and
    the largest per-frame update over the descent.
    """
    poses = dict(poses)
    update_norm = 0.0
    cost = _ls_cost(poses, frozen)
    lam = damping
    for _ in range(max_iters):
        h, g = _assemble_normal_equations(poses, frozen, order)
        scale = float(np.trace(h)) / max(len(g), 1)
        stepped = False
        for _ in range(10):
            try:
                delta = np.linalg.solve(h + (lam * scale + 1e-300) * np.eye(len(g)), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                trial = dict(poses)
                norm = 0.0
                for fid, k in order.items():
                    step = delta[6 * k : 6 * k + 6]
                    norm = max(norm, float(np.linalg.norm(step)))
                    trial[fid] = poses[fid].compose(exp_se3(Twist.from_vector(step)))
                trial_cost = _ls_cost(trial, frozen)
                if trial_cost <= cost:
                    improvement = cost - trial_cost
                    poses, cost = trial, trial_cost
                    update_norm = max(update_norm, norm)
                    lam = max(lam / 2.0, damping)
                    stepped = True
                    if improvement <= 1e-12 * max(1.0, abs(cost)) or norm < 1e-12:
                        return poses, update_norm
                    break
            lam *= 10.0
            if lam > 1e10:
                return poses, update_norm
        if not stepped:
            return poses, update_norm
    return poses, update_norm


def irls_step(
    graph: PoseGraph,
    params: KernelParams,
    cfg: BAConfig,
    damping: Optional[float] = None,
) -> IRLSStats:
    """One reweighted step: freeze the pair weights at the current poses,
    minimize the weighted least squares over all non-gauge poses, and accept
    the move only if the objective does not decrease, escalating damping and
    retrying (up to 8 times) otherwise.

    Updates graph.poses in place when a step is accepted. The returned stats
    carry the damping to thread into the next call.
    """
    if damping is None:
        damping = cfg.damping_init
    movable = [f.id for f in graph.frames if f.id != graph.gauge_frame]
    order = {fid: k for k, fid in enumerate(movable)}
    frozen, max_weight, weights_finite, n_pairs = _freeze_edges(graph, params)
    support = {fid: 0.0 for fid in movable}
    for fe in frozen:
        for fid in (fe.m, fe.n):
            if fid in support:
                support[fid] += fe.wsum
    for fid in movable:
        if support[fid] <= 0.0:
            raise UnderconstrainedFrameError(fid)
    cost_before = original_cost(graph, params)
    h0, g0 = _assemble_normal_equations(graph.poses, frozen, order)
    gradient_norm = max(
        float(np.linalg.norm(g0[6 * k : 6 * k + 6])) for k in order.values()
    )
    retries = 0
    while True:
        candidate, update_norm = _minimize_frozen_ls(
            graph.poses, frozen, order, damping
        )
        trial = PoseGraph.__new__(PoseGraph)
        trial.frames = graph.frames
        trial.edges = graph.edges
        trial.gauge_frame = graph.gauge_frame
        trial.poses = candidate
        cost_after = original_cost(trial, params)
        if update_norm > 0.0 and cost_after >= cost_before - 1e-12 * max(
            1.0, abs(cost_before)
        ):
            graph.poses.update(candidate)
            return IRLSStats(
                cost_before=cost_before,
                cost_after=cost_after,
                accepted=True,
                update_norm=update_norm,
                gradient_norm=gradient_norm,
                max_weight=max_weight,
                n_pairs=n_pairs,
                damping=max(damping / 2.0, 1e-12),
                retries=retries,
            )
        if retries >= _MAX_DAMPING_RETRIES:
            return IRLSStats(
                cost_before=cost_before,
                cost_after=cost_before,
                accepted=False,
                update_norm=0.0,
                gradient_norm=gradient_norm,
                max_weight=max_weight,
                n_pairs=n_pairs,
                damping=damping,
                retries=retries,
            )
        damping *= 10.0
        retries += 1


def _polish_stationarity(graph: PoseGraph, params: KernelParams, cfg: BAConfig):
    """Drive the per-frame objective gradient toward zero at the final
    scales.

    Steps are damped Gauss-Newton solves with weights refreshed every step,
    accepted when the refreshed gradient norm strictly decreases. Gradient
    norms are assembled sums, so this remains meaningful below the
    objective's floating-point comparison resolution.
    """
    if cfg.polish_iterations <= 0:
        return
    movable = [f.id for f in graph.frames if f.id != graph.gauge_frame]
    if not movable:
        return
    order = {fid: k for k, fid in enumerate(movable)}

    def frame_grad_norm(g):
        return max(float(np.linalg.norm(g[6 * k : 6 * k + 6])) for k in order.values())

    frozen, _, _, _ = _freeze_edges(graph, params)
    h, g = _assemble_normal_equations(graph.poses, frozen, order)
    gnorm = frame_grad_norm(g)
    for _ in range(cfg.polish_iterations):
        if gnorm < 1e-3 * cfg.gradient_tol:
            break
        scale = float(np.trace(h)) / max(len(g), 1)
        stepped = False
        lam = 1e-9
        while lam <= 1e2:
            try:
                delta = np.linalg.solve(h + lam * scale * np.eye(len(g)), -g)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(delta)):
                break
            trial = dict(graph.poses)
            for fid, k in order.items():
                trial[fid] = graph.poses[fid].compose(
                    exp_se3(Twist.from_vector(delta[6 * k : 6 * k + 6]))
                )
            holder = PoseGraph.__new__(PoseGraph)
            holder.frames = graph.frames
            holder.edges = graph.edges
            holder.gauge_frame = graph.gauge_frame
            holder.poses = trial
            frozen_t, _, _, _ = _freeze_edges(holder, params)
            h_t, g_t = _assemble_normal_equations(trial, frozen_t, order)
            if frame_grad_norm(g_t) < gnorm:
                graph.poses.update(trial)
                frozen, h, g = frozen_t, h_t, g_t
                gnorm = frame_grad_norm(g)
                stepped = True
                break
            lam *= 100.0
        if not stepped:
            break


def optimize(
    graph: PoseGraph,
    params: KernelParams,
    schedule: LengthscaleSchedule,
    cfg: BAConfig,
) -> BAResult:
    """Inner-outer optimization of the pose graph.

    Each outer iteration runs the reweighted Gauss-Newton inner loop to
    stationarity at the current per-edge lengthscales, then moves every
    edge's lengthscale one schedule step. The recorded objective trace keeps
    only non-decreasing values (comparisons across different lengthscales
    are not meaningful); convergence is declared when an outer iteration's
    own-scale objective gain falls below outer_tol.
    """
    for e in graph.edges:
        if e.ell_state is None:
            e.ell_state = schedule.ell_init
    max_weight_seen = 0.0
    weights_finite = True
    trace = [(0, original_cost(graph, params))]
    last_recorded = trace[0][1]
    converged = False
    outer_used = 0
    for outer in range(1, cfg.max_outer_iterations + 1):
        outer_used = outer
        cost_pre = original_cost(graph, params)
        damping = cfg.damping_init
        max_update = 0.0
        for _ in range(cfg.max_inner_iterations):
            stats = irls_step(graph, params, cfg, damping=damping)
            damping = stats.damping
            max_weight_seen = max(max_weight_seen, stats.max_weight)
            weights_finite = weights_finite and bool(np.isfinite(stats.max_weight))
            max_update = max(max_update, stats.update_norm)
            if not stats.accepted:
                break
            if stats.update_norm < cfg.inner_tol:
                break
            if stats.gradient_norm < cfg.gradient_tol:
                break
        cost_post = original_cost(graph, params)
        gain = cost_post - cost_pre
        if cost_post >= last_recorded:
            trace.append((outer, cost_post))
            last_recorded = cost_post
        # Graphs that are stationary at the coarsest scale are already done.
        if outer == 1 and gain < cfg.outer_tol and max_update < 1e2 * cfg.inner_tol:
            converged = True
            break
        # Move each edge's scale one schedule step; convergence requires both
        # exhausted same-scale gains and a settled schedule.
        settled = True
        for e in graph.edges:
            fm, fn = graph.frame(e.m), graph.frame(e.n)
            t_rel = graph.poses[e.m].inverse().compose(graph.poses[e.n])
            new_ell = step_ell(fm, fn, t_rel, params, e.ell_state, schedule)
            if abs(new_ell - e.ell_state) > 1e-12:
                settled = False
            e.ell_state = new_ell
        if gain < cfg.outer_tol and settled:
            converged = True
            break
    _polish_stationarity(graph, params, cfg)
    grads = original_cost_gradient(graph, params)
    final_grad = max(
        float(np.linalg.norm(v))
        for fid, v in grads.items()
        if fid != graph.gauge_frame
    ) if len(graph.frames) > 1 else 0.0
    return BAResult(
        poses=dict(graph.poses),
        objective_trace=trace,
        converged=converged,
        outer_iterations=outer_used,
        max_weight_seen=max_weight_seen,
        weights_finite=weights_finite,
        final_gradient_norm=final_grad,
    )


def build_window_graph(frames: list, window: int, ell: Optional[float] = None) -> PoseGraph:
    """Complete pose graph over the last `window` frames; the earliest frame
    in the window is the gauge."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(frames) < 2:
        raise ValueError("need at least 2 frames for a window graph")
    active = list(frames[-window:])
    edges = [
        Edge(active[a].id, active[b].id, ell)
        for a in range(len(active))
        for b in range(a + 1, len(active))
    ]
    return PoseGraph(frames=active, edges=edges, gauge_frame=active[0].id)


def build_global_graph(
    frames: list,
    poses: list,
    radius: float,
    ell: Optional[float] = None,
) -> PoseGraph:
    """Sequential edges plus proximity edges for frames whose pose
    translations are within `radius` meters; poses come from an ingested
    trajectory and seed the working estimates."""
    if len(frames) != len(poses):
        raise ValueError("one pose per frame required")
    if len(frames) < 2:
        raise ValueError("need at least 2 frames for a global graph")
    frames = [f.with_pose(p) for f, p in zip(frames, poses)]
    edges = [Edge(frames[k].id, frames[k + 1].id, ell) for k in range(len(frames) - 1)]
    for a in range(len(frames)):
        for b in range(a + 2, len(frames)):
            gap = np.linalg.norm(poses[a].translation - poses[b].translation)
            if gap <= radius:
                edges.append(Edge(frames[a].id, frames[b].id, ell))
    return PoseGraph(frames=frames, edges=edges, gauge_frame=frames[0].id)
