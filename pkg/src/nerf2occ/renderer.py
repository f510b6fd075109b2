"""Differentiable volumetric rendering with density- and occupancy-based
compositing, plus hierarchical (coarse-to-fine) ray sampling.

Both compositing modes share a single formula: per-sample opacity values
(alpha from density, or occupancy directly) are accumulated front-to-back
with transmittance T_i = prod_{j<i}(1 - a_j) and weights w_i = T_i * a_i.
The coarse pass always uses density alphas, and its weights drive the
inverse-CDF placement of fine samples in either mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import all_pixels, gen_rays  # noqa: F401  (ray generation lives here too)

BACKGROUND_COLOR = (1.0, 1.0, 1.0)


@dataclass
class SamplingConfig:
    n_coarse: int = 96
    n_fine: int = 32
    jitter: bool = True


@dataclass
class RenderOutput:
    color: Tensor        # (rays, 3), background already composited
    depth: Tensor        # (rays,), expected along-ray distance
    weights: Tensor      # (rays, samples)
    alphas: Tensor       # (rays, samples): alpha_i or o_i depending on mode
    trans: Tensor        # (rays, samples): T_i
    acc: Tensor          # (rays,): sum of weights
    ts: np.ndarray       # (rays, samples) sample positions (constants)


def stratified_sample(near: float, far: float, n: int, n_rays: int,
                      jitter: bool, rng) -> np.ndarray:
    """One sample per equal bin: centers when jitter is off, else uniform
    within each bin."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    width = (far - near) / n
    edges = near + width * np.arange(n)
    if jitter:
        offset = rng.uniform(0.0, 1.0, size=(n_rays, n))
    else:
        offset = np.full((n_rays, n), 0.5)
    return edges + width * offset


def importance_sample(coarse_ts: np.ndarray, weights: np.ndarray,
                      near: float, far: float, n_fine: int, rng,
                      floor: float = 1e-5) -> np.ndarray:
    """Merge `n_fine` inverse-CDF draws from the piecewise-constant coarse
    weight distribution (one bin per coarse stratum) into the sample set."""
    if np.any(weights < 0):
        raise ValueError("coarse weights must be nonnegative")
    n_rays, n_coarse = weights.shape
    w = weights + floor
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((n_rays, 1)), cdf], axis=1)

    u = rng.uniform(0.0, 1.0, size=(n_rays, n_fine))
    idx = np.empty((n_rays, n_fine), dtype=np.int64)
    for r in range(n_rays):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, n_coarse - 1)

    lo = np.take_along_axis(cdf, idx, axis=1)
    hi = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = (u - lo) / np.maximum(hi - lo, 1e-12)
    width = (far - near) / n_coarse
    fine = near + width * (idx + frac)
    merged = np.concatenate([coarse_ts, fine], axis=1)
    merged.sort(axis=1)
    return merged


def deltas(ts: np.ndarray, near: float, far: float) -> np.ndarray:
    """Inter-sample spacings; the last interval is capped at the mean
    spacing (far - near) / N instead of extending to infinity."""
    n = ts.shape[1]
    cap = np.full((ts.shape[0], 1), (far - near) / n)
    return np.concatenate([ts[:, 1:] - ts[:, :-1], cap], axis=1)


def alpha_from_sigma(sigma: Tensor, delta: np.ndarray) -> Tensor:
    """alpha = 1 - exp(-sigma * delta)."""
    return ad.sub(Tensor(np.ones((), dtype=sigma.dtype.type)),
                  ad.exp(ad.neg(ad.mul(sigma, Tensor(delta.astype(sigma.dtype.type))))))


def composite(alphas: Tensor, colors: Tensor, ts: np.ndarray) -> RenderOutput:
    """Front-to-back accumulation shared by both rendering modes.

    The returned color excludes the background term; callers add it.
    """
    if alphas.shape[:2] != colors.shape[:2] or alphas.shape[1] != ts.shape[1]:
        raise ValueError(f"per-sample lengths disagree: alphas {alphas.shape}, "
                         f"colors {colors.shape}, ts {ts.shape}")
    one = Tensor(np.ones((), dtype=alphas.dtype.type))
    trans = ad.exclusive_cumprod(ad.sub(one, alphas))
    weights = ad.mul(trans, alphas)
    color = ad.tsum(ad.mul(ad.reshape(weights, (*weights.shape, 1)), colors), axis=1)
    acc = ad.tsum(weights, axis=1)
    t_const = Tensor(ts.astype(alphas.dtype.type))
    depth = ad.div(ad.tsum(ad.mul(weights, t_const), axis=1),
                   ad.clamp_min(acc, 1e-8))
    return RenderOutput(color=color, depth=depth, weights=weights,
                        alphas=alphas, trans=trans, acc=acc, ts=ts)


def _weights_np(alphas: np.ndarray) -> np.ndarray:
    shifted = np.concatenate([np.ones_like(alphas[:, :1]), 1.0 - alphas[:, :-1]], axis=1)
    return np.cumprod(shifted, axis=1) * alphas


def sample_rays(scene, bundle, origins, dirs, cfg: SamplingConfig, rng):
    """Coarse density pass plus importance sampling; returns the merged
    sample positions and the coarse weights (both constants)."""
    n_rays = origins.shape[0]
    coarse_ts = stratified_sample(scene.near, scene.far, cfg.n_coarse, n_rays,
                                  cfg.jitter, rng)
    with ad.no_tape():
        pts = (origins[:, None, :] + coarse_ts[..., None] * dirs[:, None, :]).reshape(-1, 3)
        sigma = bundle.sigma_at(pts, scene).reshape(n_rays, cfg.n_coarse)
        alpha = 1.0 - np.exp(-sigma * deltas(coarse_ts, scene.near, scene.far))
        coarse_w = _weights_np(alpha)
    if cfg.n_fine > 0:
        ts = importance_sample(coarse_ts, coarse_w, scene.near, scene.far,
                               cfg.n_fine, rng)
    else:
        ts = coarse_ts
    return ts, coarse_w


def render_rays(scene, bundle, origins, dirs, cfg: SamplingConfig, rng,
                modes=("density",), ts=None, white_background=True):
    """Render a ray batch in one or both modes sharing a single field pass.

    Returns {mode: RenderOutput}. Pass `ts` to reuse precomputed sample
    positions (needed when losses must see the exact sampling of an earlier
    inspection pass).
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if ts is None:
        ts, _ = sample_rays(scene, bundle, origins, dirs, cfg, rng)
    n_rays, n_samples = ts.shape

    pts = (origins[:, None, :] + ts[..., None] * dirs[:, None, :]).reshape(-1, 3)
    view_dirs = np.broadcast_to(dirs[:, None, :], (n_rays, n_samples, 3)).reshape(-1, 3)
    features = bundle.encode(pts, scene)
    colors = ad.reshape(bundle.decode_color(features, view_dirs), (n_rays, n_samples, 3))
    delta = deltas(ts, scene.near, scene.far)

    out = {}
    for mode in modes:
        if mode == "density":
            sigma = ad.reshape(bundle.decode_sigma(features), (n_rays, n_samples))
            alphas = alpha_from_sigma(sigma, delta)
        elif mode == "occupancy":
            alphas = ad.reshape(bundle.decode_occupancy(features), (n_rays, n_samples))
        else:
            raise ValueError(f"unknown rendering mode {mode!r}")
        result = composite(alphas, colors, ts)
        if white_background:
            bg = Tensor(np.asarray(BACKGROUND_COLOR, dtype=result.color.dtype.type))
            miss = ad.sub(Tensor(np.ones((), dtype=result.color.dtype.type)), result.acc)
            result.color = ad.add(result.color,
                                  ad.mul(ad.reshape(miss, (n_rays, 1)), bg))
        out[mode] = result
    return out


def render_pixel(origin, direction, scene, bundle, mode: str,
                 cfg: SamplingConfig, rng) -> RenderOutput:
    """Single-ray rendering in the requested mode."""
    outputs = render_rays(scene, bundle, np.reshape(origin, (1, 3)),
                          np.reshape(direction, (1, 3)), cfg, rng, modes=(mode,))
    return outputs[mode]


def render_image(scene, bundle, camera, mode: str, cfg: SamplingConfig,
                 rng=None, chunk: int = 1024):
    """Full-view render (no tape, deterministic center sampling unless a
    generator is supplied for jitter). Returns (image, depth) arrays."""
    pixels = all_pixels(camera)
    origins, dirs = gen_rays(camera, pixels)
    eval_cfg = SamplingConfig(cfg.n_coarse, cfg.n_fine, cfg.jitter and rng is not None)
    rng = rng or np.random.default_rng(0)
    images, depths = [], []
    with ad.no_tape():
        for start in range(0, origins.shape[0], chunk):
            sl = slice(start, start + chunk)
            out = render_rays(scene, bundle, origins[sl], dirs[sl], eval_cfg,
                              rng, modes=(mode,))[mode]
            images.append(out.color.data)
            depths.append(out.depth.data)
    h, w = camera.height, camera.width
    image = np.concatenate(images, axis=0).reshape(h, w, 3)
    depth = np.concatenate(depths, axis=0).reshape(h, w)
    return image, depth
