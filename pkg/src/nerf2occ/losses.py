"""Training objectives for the density-to-occupancy transfer.

Per-ray terms (all >= 0, exactly 0 at their fixed points):
  - color reproduction for each rendering mode (Euclidean RGB distance),
  - bootstrap: squared gap between occupancies and detached density alphas,
  - weight supervision: squared gap between occupancy-composited weights and
    an unnormalized Gaussian centered on the secant root, whose width `a`
    shrinks over training as max(a_max * exp(-k * beta), a_min),
  - normal smoothing: squared distance between unit occupancy gradients at
    the hit point and at a small random perturbation of it,
  - depth supervision: masked L1 between expected and ground-truth depth.

Scalar norms are implemented as squared differences. Root locations, the
Gaussian targets and all sample positions are constants: gradients flow only
through the field networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    normal: float = 0.1       # lambda
    weight: float = 0.2       # mu
    bootstrap: float = 0.2    # nu, active during warm-up only
    depth: float = 0.1
    warmup_steps: int = 100

    def __post_init__(self):
        if min(self.normal, self.weight, self.bootstrap, self.depth) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class WidthSchedule:
    a_max: float = 1.0
    a_min: float = 0.04       # 0.004 is the sharper published alternative
    beta: float = 0.001

    def __post_init__(self):
        if not (self.a_max >= self.a_min > 0) or self.beta <= 0:
            raise ValueError("invalid width schedule")


def schedule_width(k: int, ws: WidthSchedule) -> float:
    """a = max(a_max * exp(-k * beta), a_min), k the global iteration."""
    if k < 0:
        raise ValueError("iteration must be nonnegative")
    return max(ws.a_max * float(np.exp(-k * ws.beta)), ws.a_min)


def loss_vol(c_pred: Tensor, c_gt) -> Tensor:
    """Per-ray Euclidean norm of the RGB difference, shape (rays,)."""
    gt = Tensor(np.asarray(c_gt, dtype=c_pred.dtype.type).reshape(c_pred.shape))
    sq = ad.tsum(ad.square(ad.sub(c_pred, gt)), axis=-1)
    return ad.sqrt(sq)


def loss_bootstrap(occ: Tensor, alphas) -> Tensor:
    """Per-ray sum of squared occupancy/alpha gaps; alphas are constants."""
    a = np.asarray(alphas, dtype=occ.dtype.type)
    if a.shape != occ.shape:
        raise ValueError(f"occupancy shape {occ.shape} does not match alphas {a.shape}")
    return ad.tsum(ad.square(ad.sub(occ, Tensor(a))), axis=-1)


def gaussian_weight_target(ts: np.ndarray, t_star, a: float) -> np.ndarray:
    """Unnormalized Gaussian exp(-((t - t*) / a)^2) at the sample positions."""
    t_star = np.asarray(t_star, dtype=np.float64)
    return np.exp(-(((ts - t_star[..., None]) / a) ** 2))


def loss_weight(weights: Tensor, ts: np.ndarray, t_star, a: float) -> Tensor:
    """Single-ray weight supervision; requires a located surface hit."""
    if t_star is None:
        raise ValueError("loss_weight needs a surface hit; caller must skip this ray")
    target = gaussian_weight_target(ts.reshape(1, -1), [float(t_star)], a)
    target = Tensor(target.reshape(-1).astype(weights.dtype.type))
    return ad.tsum(ad.square(ad.sub(weights, target)))


def loss_weight_batch(weights: Tensor, ts: np.ndarray, t_star: np.ndarray,
                      hit_mask: np.ndarray, a: float) -> Tensor:
    """Per-ray weight supervision, 0 for rays without a hit."""
    target = gaussian_weight_target(ts, t_star, a)
    target[~hit_mask] = 0.0
    mask = Tensor(hit_mask.astype(weights.dtype.type))
    diff = ad.sub(ad.mul(weights, ad.reshape(mask, (-1, 1))),
                  Tensor(target.astype(weights.dtype.type)))
    return ad.tsum(ad.square(diff), axis=-1)


def _probe_offsets(h: float) -> np.ndarray:
    """12 probe offsets: +/-h per axis at the hit point, then at the
    perturbed point (the eps is added separately)."""
    probes = np.zeros((6, 3))
    for axis in range(3):
        probes[2 * axis, axis] = h
        probes[2 * axis + 1, axis] = -h
    return probes


def _fd_matrices(h: float, dtype) -> tuple:
    """Selection matrices turning 12 probe values into two FD gradients."""
    s = np.zeros((12, 3))
    for axis in range(3):
        s[2 * axis, axis] = 1.0 / (2.0 * h)
        s[2 * axis + 1, axis] = -1.0 / (2.0 * h)
    sp = np.zeros((12, 3))
    sq = np.zeros((12, 3))
    sp[:6] = s[:6]
    sq[6:] = s[:6]
    return Tensor(sp.astype(dtype)), Tensor(sq.astype(dtype))


def _normalize_rows(g: Tensor, floor: float = 1e-8) -> Tensor:
    norm = ad.sqrt(ad.tsum(ad.square(g), axis=-1))
    return ad.div(g, ad.reshape(ad.clamp_min(norm, floor), (-1, 1)))


def loss_normal_batch(occ_fn, x_star: np.ndarray, eps: np.ndarray,
                      hit_mask: np.ndarray, h: float = 1e-3) -> Tensor:
    """Per-ray normal smoothing via six finite-difference probes per point.

    `occ_fn(points)` evaluates occupancy on the active tape, so the loss is
    differentiable in the network weights; probe positions are constants.
    """
    n_rays = x_star.shape[0]
    offsets = _probe_offsets(h)
    pts = np.concatenate([
        x_star[:, None, :] + offsets[None, :, :],
        (x_star + eps)[:, None, :] + offsets[None, :, :],
    ], axis=1)  # (rays, 12, 3)
    vals = occ_fn(pts.reshape(-1, 3))
    vals = ad.reshape(vals, (n_rays, 12))
    sp, sq = _fd_matrices(h, vals.dtype.type)
    n_p = _normalize_rows(ad.matmul(vals, sp))
    n_q = _normalize_rows(ad.matmul(vals, sq))
    per_ray = ad.tsum(ad.square(ad.sub(n_p, n_q)), axis=-1)
    mask = Tensor(hit_mask.astype(per_ray.dtype.type))
    return ad.mul(per_ray, mask)


def loss_normal(occ_fn, x_star, eps, h: float = 1e-3) -> Tensor:
    """Single-point smoothing loss (scalar tensor)."""
    out = loss_normal_batch(occ_fn, np.reshape(x_star, (1, 3)),
                            np.reshape(eps, (1, 3)), np.ones(1, dtype=bool), h)
    return ad.tsum(out)


def loss_depth(depth_pred: Tensor, gt_depth, hit_mask) -> Tensor:
    """Mean |pred - gt| over rays with ground-truth hits (0 if none)."""
    gt = np.asarray(gt_depth, dtype=depth_pred.dtype.type)
    mask = np.asarray(hit_mask, dtype=bool)
    count = max(int(mask.sum()), 1)
    m = Tensor(mask.astype(depth_pred.dtype.type))
    diff = ad.mul(ad.sub(depth_pred, Tensor(gt)), m)
    return ad.scale(ad.tsum(ad.absolute(diff)), 1.0 / count)


def sample_normal_perturbations(n: int, rng, radius: float = 0.01) -> np.ndarray:
    """Uniform draws from the ball of the given radius, fresh per ray."""
    d = rng.normal(size=(n, 3))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return d * r


def total_loss(terms: dict, weights: LossWeights, k: int) -> Tensor:
    """Weighted combination averaged over the ray batch.

    `terms` carries per-ray tensors under keys vol_o, vol_sigma, normal,
    weight, bootstrap (masked where a ray has no hit) and a scalar `depth`.
    The bootstrap weight applies only while k < warmup_steps.
    """
    per_ray = ad.add(terms["vol_o"], terms["vol_sigma"])
    if weights.normal > 0:
        per_ray = ad.add(per_ray, ad.scale(terms["normal"], weights.normal))
    if weights.weight > 0:
        per_ray = ad.add(per_ray, ad.scale(terms["weight"], weights.weight))
    nu = weights.bootstrap if k < weights.warmup_steps else 0.0
    if nu > 0:
        per_ray = ad.add(per_ray, ad.scale(terms["bootstrap"], nu))
    total = ad.tmean(per_ray)
    if weights.depth > 0 and "depth" in terms:
        total = ad.add(total, ad.scale(terms["depth"], weights.depth))
    return total
