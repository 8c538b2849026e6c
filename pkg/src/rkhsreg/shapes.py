"""Procedural test clouds: a multi-lobe closed surface with analytic normals
at roughly hand-scanned-object scale, plus simple scene/scan generators for
odometry-style sequences."""

from __future__ import annotations

import math

import numpy as np

from rkhsreg.kernels import ChannelGroup, Frame
from rkhsreg.se3 import Pose


def _lobe_radius_and_gradient(u: np.ndarray, radius: float, bumps, ripples=()):
    """Deformed sphere radius for unit directions u, with the gradient of the
    radius with respect to u.

    R(u) = r (1 + sum_k a_k (u . v_k)^3 + sum_k b_k sin(w_k u . v_k)); the
    cubic terms shape the lobe at large scale, the sine terms add fine
    surface relief that anchors fine-scale alignment.
    """
    r = np.full(len(u), radius)
    grad = np.zeros_like(u)
    for amp, v in bumps:
        dot = u @ v
        r += radius * amp * dot**3
        grad += (3.0 * radius * amp * dot**2)[:, None] * v[None, :]
    for amp, freq, v in ripples:
        dot = u @ v
        r += radius * amp * np.sin(freq * dot)
        grad += (radius * amp * freq * np.cos(freq * dot))[:, None] * v[None, :]
    return r, grad


def multi_lobe_cloud(
    n_points: int = 3000,
    seed: int = 0,
    extent: float = 0.15,
    n_lobes: int = 3,
    label_mode: str = "color",
    frame_id: int = 0,
) -> Frame:
    """Sample a closed multi-lobe surface of roughly the given extent.

    Lobes are deformed spheres of distinct radii with cubic directional bumps,
    which makes the union chiral and free of rotational symmetries. Normals
    are computed from the analytic surface gradient. label_mode selects the
    per-point labels: "color" (3 channels, by lobe with a smooth positional
    blend), "class" (distribution over n_lobes classes), "both", or "none".
    """
    rng = np.random.default_rng(seed)
    scale = extent / 0.15
    base_centers = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.055, 0.02, 0.035],
            [-0.045, 0.05, -0.02],
            [0.01, -0.055, 0.04],
            [-0.03, -0.03, -0.05],
        ]
    )
    base_radii = np.array([0.05, 0.035, 0.03, 0.028, 0.026])
    centers = base_centers[:n_lobes] * scale
    radii = base_radii[:n_lobes] * scale

    lobes = []
    for k in range(n_lobes):
        bumps = []
        for _ in range(3):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            bumps.append((rng.uniform(0.08, 0.22), v))
        ripples = []
        for _ in range(2):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            ripples.append((rng.uniform(0.02, 0.04), rng.uniform(9.0, 14.0), v))
        lobes.append((centers[k], radii[k], bumps, ripples))

    # Oversample per lobe, keep surface points outside every other lobe.
    per_lobe = max(4, int(math.ceil(2.2 * n_points / n_lobes)))
    points, normals, lobe_ids = [], [], []
    for k, (center, radius, bumps, ripples) in enumerate(lobes):
        u = rng.normal(size=(per_lobe, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r, grad_u = _lobe_radius_and_gradient(u, radius, bumps, ripples)
        p = center + r[:, None] * u
        # Normal of the level set |p - c| - R(u): u minus the tangential
        # gradient of R projected through the direction map.
        tangential = (grad_u - (np.einsum("ij,ij->i", grad_u, u))[:, None] * u)
        nrm = u - tangential / r[:, None]
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        inside_other = np.zeros(per_lobe, dtype=bool)
        for kk, (c2, r2, bumps2, ripples2) in enumerate(lobes):
            if kk == k:
                continue
            rel = p - c2
            dist = np.linalg.norm(rel, axis=1)
            safe = np.maximum(dist, 1e-12)
            r2v, _ = _lobe_radius_and_gradient(rel / safe[:, None], r2, bumps2, ripples2)
            inside_other |= dist < r2v
        points.append(p[~inside_other])
        normals.append(nrm[~inside_other])
        lobe_ids.append(np.full((~inside_other).sum(), k))

    points = np.concatenate(points)
    normals = np.concatenate(normals)
    lobe_ids = np.concatenate(lobe_ids)
    if len(points) > n_points:
        keep = rng.choice(len(points), size=n_points, replace=False)
        keep.sort()
        points, normals, lobe_ids = points[keep], normals[keep], lobe_ids[keep]

    labels, groups = _lobe_labels(points, lobe_ids, n_lobes, label_mode, extent)
    return Frame(
        frame_id,
        points,
        labels,
        channel_groups=groups,
        normals=normals,
    )


def _lobe_labels(points, lobe_ids, n_lobes, label_mode, extent):
    palette = np.array(
        [
            [0.9, 0.15, 0.1],
            [0.1, 0.8, 0.2],
            [0.15, 0.25, 0.9],
            [0.85, 0.8, 0.1],
            [0.7, 0.1, 0.8],
        ]
    )
    parts = []
    groups = []
    if label_mode in ("color", "both", "textured"):
        color = palette[lobe_ids % len(palette)]
        # Smooth positional shading keeps colors informative within a lobe.
        shade = 0.15 * np.tanh(points / (0.5 * extent))
        color = np.clip(color + shade, 0.0, 1.0)
        groups.append(ChannelGroup("color", 0, 3))
        parts.append(color)
    if label_mode in ("class", "both"):
        start = sum(p.shape[1] for p in parts)
        dist = np.full((len(points), n_lobes), 0.05 / max(n_lobes - 1, 1))
        dist[np.arange(len(points)), lobe_ids] = 0.95
        dist /= dist.sum(axis=1, keepdims=True)
        groups.append(ChannelGroup("class", start, start + n_lobes))
        parts.append(dist)
    if label_mode == "textured":
        # Descriptor-style channels: smooth surface fields whose correlation
        # decays with surface distance, discriminating points within a lobe.
        start = sum(p.shape[1] for p in parts)
        wavelength = 0.35 * extent
        tex = np.column_stack(
            [
                0.5 + 0.5 * np.sin(2.0 * math.pi * points @ v / wavelength)
                for v in (
                    np.array([1.0, 0.3, -0.2]),
                    np.array([-0.25, 1.0, 0.4]),
                    np.array([0.3, -0.4, 1.0]),
                )
            ]
        )
        groups.append(ChannelGroup("generic", start, start + 3))
        parts.append(tex)
    if not parts:
        return None, ()
    return np.concatenate(parts, axis=1), tuple(groups)


def mixed_class_cloud(
    n_points: int = 1000, n_classes: int = 4, seed: int = 0, extent: float = 0.15
) -> Frame:
    """Spatially interleaved points of well-separated classes: every
    geometric neighborhood mixes classes, so semantic pruning has maximal
    effect. Labels are exact one-hot class distributions."""
    rng = np.random.default_rng(seed)
    points = rng.uniform(-extent / 2, extent / 2, size=(n_points, 3))
    classes = rng.integers(0, n_classes, size=n_points)
    labels = np.zeros((n_points, n_classes))
    labels[np.arange(n_points), classes] = 1.0
    return Frame(
        0,
        points,
        labels,
        channel_groups=(ChannelGroup("class", 0, n_classes),),
    )


def corridor_scene(
    length: float = 8.0,
    width: float = 2.0,
    height: float = 1.5,
    density: float = 900.0,
    seed: int = 0,
) -> Frame:
    """A corridor of two textured walls and a floor along +x, in world
    coordinates, with per-point colors that vary along the corridor."""
    rng = np.random.default_rng(seed)
    n_wall = int(length * height * density)
    n_floor = int(length * width * density)
    walls = []
    for side in (-1.0, 1.0):
        x = rng.uniform(0.0, length, size=n_wall)
        z = rng.uniform(0.0, height, size=n_wall)
        y = np.full(n_wall, side * width / 2)
        # Shallow bumps so the walls constrain translation along x.
        y += 0.08 * np.sin(2.0 * math.pi * x / 0.9) * np.cos(
            2.0 * math.pi * z / 0.7
        ) * side
        walls.append(np.column_stack([x, y, z]))
    xf = rng.uniform(0.0, length, size=n_floor)
    yf = rng.uniform(-width / 2, width / 2, size=n_floor)
    zf = 0.03 * np.sin(2.0 * math.pi * xf / 1.3) * np.sin(2.0 * math.pi * yf / 0.8)
    floor = np.column_stack([xf, yf, zf])
    points = np.concatenate(walls + [floor])
    colors = np.column_stack(
        [
            0.5 + 0.5 * np.sin(2.0 * math.pi * points[:, 0] / 1.7),
            0.5 + 0.5 * np.cos(2.0 * math.pi * points[:, 0] / 2.3),
            np.clip(points[:, 2] / max(height, 1e-9), 0.0, 1.0),
        ]
    )
    return Frame(0, points, colors, channel_groups=(ChannelGroup("color", 0, 3),))


def scan_from_pose(
    scene: Frame,
    pose: Pose,
    sensor_range: float = 2.5,
    max_points: int = 1200,
    frame_id: int = 0,
    seed: int = 0,
) -> Frame:
    """Simulated scan: scene points within sensor_range of the pose origin,
    expressed in the sensor frame, downsampled to max_points."""
    rel = scene.positions - pose.translation
    mask = np.linalg.norm(rel, axis=1) <= sensor_range
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("no scene points within sensor range")
    if len(idx) > max_points:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(idx, size=max_points, replace=False))
    local = pose.inverse().apply(scene.positions[idx])
    return Frame(
        frame_id,
        local,
        scene.labels[idx] if scene.label_dim else None,
        pose=pose,
        channel_groups=scene.channel_groups,
    )
