"""Two-frame alignment: local gradient ascent on the kernel-space inner
product, and global initialization that scores all 60 icosahedral rotation
candidates before refining locally."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from rkhsreg import se3
from rkhsreg.kernels import (
    Frame,
    KernelParams,
    LengthscaleSchedule,
    cosine_alignment,
    dense_inner_product,
    inner_product,
    pair_set,
)
from rkhsreg.se3 import Pose, Twist, exp_se3


class DegenerateFrameError(ValueError):
    """Raised when a frame cannot constrain a registration (all points
    coincident)."""


@dataclass
class RegistrationConfig:
    """Gradient-ascent settings for two-frame registration.

    max_iterations caps the total number of ascent steps; step_init and
    step_decay control the backtracking line search; convergence_tol is on
    the accepted twist-update norm. ell_schedule drives the coarse-to-fine
    lengthscale, shared with the multi-frame backend.
    """

    ell_schedule: LengthscaleSchedule
    max_iterations: int = 1000
    step_init: float = 1.0
    step_decay: float = 0.5
    convergence_tol: float = 1e-7
    # Number of top-scoring rotation candidates register_global refines; the
    # best final objective wins. 1 reproduces plain best-candidate refinement.
    refine_candidates: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0.0:
            raise ValueError("convergence_tol must be positive")
        if not (0.0 < self.step_decay < 1.0):
            raise ValueError("step_decay must be in (0, 1)")
        if self.refine_candidates < 1:
            raise ValueError("refine_candidates must be >= 1")


@dataclass
class RegistrationResult:
    pose: Pose
    final_cosine: float
    iterations_used: int
    converged: bool
    final_ell: float = 0.0
    initializer_scores: Optional[np.ndarray] = None
    objective_trace: Optional[list] = None


# Armijo sufficient-increase factor for the backtracking line search.
_ARMIJO = 1e-4
_MIN_STEP = 1e-14

_GROUP = None


def _icosahedral_cached():
    global _GROUP
    if _GROUP is None:
        _GROUP = se3.icosahedral_group()
    return _GROUP


def inner_product_and_gradient(
    frame_m: Frame, frame_n: Frame, t_rel: Pose, params: KernelParams
):
    """Inner product and its gradient with respect to a right perturbation of
    t_rel, assembled from the per-pair kernel terms."""
    value, grad, _ = _value_gradient_curvature(frame_m, frame_n, t_rel, params)
    return value, grad


def _value_gradient_curvature(
    frame_m: Frame, frame_n: Frame, t_rel: Pose, params: KernelParams
):
    """Inner product, right-perturbation gradient, and the pair-weighted
    squared-Jacobian matrix used as the ascent metric.

    The metric sum w [I | -skew(z)]^T [I | -skew(z)] / ell^2 is positive
    semidefinite, so the preconditioned direction is always an ascent
    direction for the line search.
    """
    pairs = pair_set(frame_m, frame_n, t_rel, params)
    value = float(np.dot(pairs.c, pairs.h))
    grad = np.zeros(6)
    metric = np.zeros((6, 6))
    if len(pairs):
        w = pairs.c * pairs.h
        # diff rows are x_i - T z_j in frame_m coordinates; rotate back into
        # frame_n coordinates where the right perturbation lives.
        v = pairs.diff @ t_rel.rotation.matrix
        inv_ell2 = 1.0 / params.ell**2
        z = frame_n.positions[pairs.j]
        grad[:3] = inv_ell2 * (w @ v)
        grad[3:] = inv_ell2 * (w @ np.cross(z, v))
        # [I | -skew(z)]^T [I | -skew(z)] blocks: the rotation part reduces to
        # weighted second moments of z, the cross block to skew of the
        # weighted mean.
        wsum = float(w.sum())
        wz = w @ z
        second = inv_ell2 * ((w[:, None] * z).T @ z)
        metric[:3, :3] = inv_ell2 * wsum * np.eye(3)
        sk = se3.skew(wz)
        metric[:3, 3:] = -inv_ell2 * sk
        metric[3:, :3] = inv_ell2 * sk
        metric[3:, 3:] = np.trace(second) * np.eye(3) - second
    return value, grad, metric


def gradient_check(
    frame_m: Frame, frame_n: Frame, t: Pose, params: KernelParams
) -> float:
    """Max component error between the analytic gradient and central finite
    differences of the untruncated inner product, step 1e-6."""
    dense = params.dense()
    _, grad = inner_product_and_gradient(frame_m, frame_n, t, dense)
    step = 1e-6
    fd = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = step
        hi = dense_inner_product(
            frame_m, frame_n, t.compose(exp_se3(Twist.from_vector(e))), dense
        )
        lo = dense_inner_product(
            frame_m, frame_n, t.compose(exp_se3(Twist.from_vector(-e))), dense
        )
        fd[k] = (hi - lo) / (2.0 * step)
    return float(np.max(np.abs(grad - fd)))


def _check_registrable(frame: Frame) -> None:
    if frame.n == 0:
        raise DegenerateFrameError(f"frame {frame.id} is empty")
    if frame.n == 1 or float(np.ptp(frame.positions, axis=0).max()) <= 0.0:
        raise DegenerateFrameError(
            f"frame {frame.id} has all points coincident; pose unobservable"
        )


def _recentered(frame: Frame, center: np.ndarray) -> Frame:
    return Frame(
        frame.id,
        frame.positions - center,
        frame.labels,
        channel_groups=frame.channel_groups,
    )


def _label_weighted_centroid(frame: Frame) -> np.ndarray:
    if frame.label_dim == 0:
        return frame.positions.mean(axis=0)
    w = np.linalg.norm(frame.labels, axis=1)
    total = w.sum()
    if total <= 0.0:
        return frame.positions.mean(axis=0)
    return (frame.positions * w[:, None]).sum(axis=0) / total


def register_local(
    frame_m: Frame,
    frame_n: Frame,
    t_init: Pose,
    params: KernelParams,
    cfg: RegistrationConfig,
) -> RegistrationResult:
    """Gradient ascent on the inner product over SE(3) from t_init.

    Runs backtracking line search at each scale of the lengthscale schedule,
    decaying the scale as residuals shrink. Both clouds are recentered
    internally so rotation steps act about the data, not the origin; the
    returned pose is expressed in the original coordinates and never scores
    below t_init under the final lengthscale.
    """
    _check_registrable(frame_m)
    _check_registrable(frame_n)
    schedule = cfg.ell_schedule
    mu = frame_m.positions.mean(axis=0)
    nu = frame_n.positions.mean(axis=0)
    m_c = _recentered(frame_m, mu)
    n_c = _recentered(frame_n, nu)
    # p -> T' p with T' = Trans(-mu) T Trans(nu)
    t_cur = Pose.from_translation(-mu).compose(t_init).compose(Pose.from_translation(nu))

    ell = schedule.ell_init
    iterations = 0
    trace = []
    converged = False
    # Fixed-percentage decay pyramid from ell_init down to ell_min.
    n_scales = (
        int(math.ceil(math.log(schedule.ell_min / schedule.ell_init)
                      / math.log(1.0 - schedule.decay_factor))) + 1
    )
    for _ in range(n_scales):
        p = params.with_ell(ell)
        inner_converged = False
        damping = 1e-6
        while iterations < cfg.max_iterations:
            value, grad, metric = _value_gradient_curvature(m_c, n_c, t_cur, p)
            iterations += 1
            gnorm = float(np.linalg.norm(grad))
            if gnorm == 0.0:
                inner_converged = True
                break
            # Ascend along the metric-preconditioned gradient, with a
            # backtracking Armijo line search from the full step.
            floor = np.trace(metric) / 6.0
            direction = np.linalg.solve(
                metric + (damping * floor + 1e-300) * np.eye(6), grad
            )
            slope = float(np.dot(grad, direction))
            alpha = cfg.step_init
            accepted_alpha = 0.0
            while alpha > _MIN_STEP:
                cand = t_cur.compose(exp_se3(Twist.from_vector(alpha * direction)))
                cand_value = inner_product(m_c, n_c, cand, p)
                if cand_value >= value + _ARMIJO * alpha * slope:
                    t_cur = cand
                    trace.append(cand_value)
                    accepted_alpha = alpha
                    break
                alpha *= cfg.step_decay
            if accepted_alpha == 0.0:
                if damping < 1e3:
                    damping *= 100.0
                    continue
                inner_converged = True
                break
            damping = max(damping / 10.0, 1e-6)
            if accepted_alpha * float(np.linalg.norm(direction)) < cfg.convergence_tol:
                inner_converged = True
                break
        if iterations >= cfg.max_iterations and not inner_converged:
            break
        if ell <= schedule.ell_min:
            converged = inner_converged
            break
        ell = schedule.clamp(ell * (1.0 - schedule.decay_factor))

    result_pose = Pose.from_translation(mu).compose(t_cur).compose(
        Pose.from_translation(-nu)
    )
    final_params = params.with_ell(ell)
    t_init_c = Pose.from_translation(-mu).compose(t_init).compose(
        Pose.from_translation(nu)
    )
    if inner_product(m_c, n_c, t_cur, final_params) < inner_product(
        m_c, n_c, t_init_c, final_params
    ):
        result_pose = t_init
    return RegistrationResult(
        pose=result_pose,
        final_cosine=cosine_alignment(frame_m, frame_n, result_pose, final_params),
        iterations_used=iterations,
        converged=converged,
        final_ell=ell,
        objective_trace=trace,
    )


def global_initializer(
    frame_m: Frame, frame_n: Frame, params: KernelParams
) -> tuple[list, np.ndarray]:
    """Candidate poses and cosine scores for all 60 icosahedral rotations.

    Each candidate rotates frame_n about its label-weighted centroid, then
    translates that centroid onto frame_m's; the evaluation count is 60
    regardless of cloud size.
    """
    mu = _label_weighted_centroid(frame_m)
    nu = _label_weighted_centroid(frame_n)
    poses = []
    scores = np.zeros(60)
    for k, rot in enumerate(_icosahedral_cached()):
        pose = Pose(rot, mu - rot.apply(nu))
        poses.append(pose)
        scores[k] = cosine_alignment(frame_m, frame_n, pose, params)
    return poses, scores


def register_global(
    frame_m: Frame,
    frame_n: Frame,
    params: KernelParams,
    cfg: RegistrationConfig,
) -> RegistrationResult:
    """Global two-frame registration: score the 60 rotation candidates at the
    coarse lengthscale, refine the best locally. Score ties within 1e-12 go to
    the lowest candidate index."""
    _check_registrable(frame_m)
    _check_registrable(frame_n)
    coarse = params.with_ell(cfg.ell_schedule.ell_init)
    poses, scores = global_initializer(frame_m, frame_n, coarse)
    best = int(np.flatnonzero(scores >= scores.max() - 1e-12)[0])
    result = register_local(frame_m, frame_n, poses[best], params, cfg)
    if cfg.refine_candidates > 1:
        order = np.argsort(-scores, kind="stable")
        runners = [k for k in order[: cfg.refine_candidates] if k != best]
        best_value = inner_product(
            frame_m, frame_n, result.pose, params.with_ell(result.final_ell)
        )
        for k in runners:
            other = register_local(frame_m, frame_n, poses[int(k)], params, cfg)
            value = inner_product(
                frame_m, frame_n, other.pose, params.with_ell(other.final_ell)
            )
            if value > best_value:
                result, best_value = other, value
    result.initializer_scores = scores
    return result
