"""
Geometry Module
Exact Euclidean distances and distance gradients to obstacles (torch, batched)
"""

import numpy as np
import torch

from modules.phase_core import AxisBox, Circle, SegmentWall

DTYPE = torch.float64


def as_tensor(values, dtype=DTYPE):
    if isinstance(values, torch.Tensor):
        return values if values.dtype == dtype else values.to(dtype)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=dtype)


def safe_norm(v, dim=-1):
    """Euclidean norm with a zero (not NaN) gradient at the origin"""
    sq = (v * v).sum(dim)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def _unit(diff, norm):
    denom = torch.where(norm > 0, norm, torch.ones_like(norm))
    return diff / denom.unsqueeze(-1)


def _circle(obstacle, w):
    center = as_tensor(obstacle.center).to(w.dtype)
    diff = w - center
    norm = safe_norm(diff)
    return norm - obstacle.radius, _unit(diff, norm)


def _box(obstacle, w):
    lo = as_tensor(obstacle.min_corner).to(w.dtype)
    hi = as_tensor(obstacle.max_corner).to(w.dtype)
    rel = w - (lo + hi) / 2
    q = rel.abs() - (hi - lo) / 2
    side = torch.where(rel >= 0, torch.ones_like(rel), -torch.ones_like(rel))

    excess = q.clamp(min=0)
    out_norm = safe_norm(excess)
    is_out = out_norm > 0
    deepest = q.max(dim=-1)
    dist = torch.where(is_out, out_norm, deepest.values)

    # Outside (corners included): direction from the closest surface point
    out_grad = side * _unit(excess, out_norm)
    in_grad = side * torch.nn.functional.one_hot(deepest.indices, w.shape[-1]).to(w.dtype)
    grad = torch.where(is_out.unsqueeze(-1), out_grad, in_grad)
    return dist, grad


def _segment_projection(obstacle, w):
    a = as_tensor(obstacle.endpoints[0]).to(w.dtype)
    b = as_tensor(obstacle.endpoints[1]).to(w.dtype)
    ab = b - a
    length_sq = float((ab * ab).sum())
    if length_sq == 0.0:
        return a.expand_as(w)
    s = (((w - a) * ab).sum(-1) / length_sq).clamp(0.0, 1.0)
    return a + s.unsqueeze(-1) * ab


def _segment(obstacle, w):
    diff = w - _segment_projection(obstacle, w)
    norm = safe_norm(diff)
    return norm - obstacle.half_width, _unit(diff, norm)


_DISTANCES = {Circle: _circle, AxisBox: _box, SegmentWall: _segment}


def distance_and_grad(obstacle, w):
    """Signed surface distance of points w (..., d) and its gradient in w"""
    return _DISTANCES[type(obstacle)](obstacle, as_tensor(w))


def core_point(obstacle, w):
    """Reference point and size for the wall repulsion term

    Circles use their center with r_obs = radius, walls the nearest
    centreline point with r_obs = half_width, boxes the nearest surface
    point with r_obs = 0.
    """
    w = as_tensor(w)
    if isinstance(obstacle, Circle):
        return as_tensor(obstacle.center).to(w.dtype).expand_as(w), obstacle.radius
    if isinstance(obstacle, SegmentWall):
        return _segment_projection(obstacle, w), obstacle.half_width
    dist, grad = _box(obstacle, w)
    return w - dist.unsqueeze(-1) * grad, 0.0


def clearance_to_obstacles(env, positions, radii):
    """(N, K) numpy array of dist(w_i, obstacle k) - r_i"""
    w = as_tensor(positions)
    r = as_tensor(radii)
    cols = [distance_and_grad(o, w)[0] - r for o in env.obstacles]
    if not cols:
        return np.zeros((w.shape[0], 0))
    return torch.stack(cols, dim=-1).numpy()


def inside_any(env, points, inflate=0.0):
    """Boolean mask of points inside (or within inflate of) any obstacle"""
    w = as_tensor(points)
    mask = torch.zeros(w.shape[:-1], dtype=torch.bool)
    for obstacle in env.obstacles:
        mask |= distance_and_grad(obstacle, w)[0] <= inflate
    return mask.numpy()
