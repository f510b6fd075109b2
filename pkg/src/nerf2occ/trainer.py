"""Two-phase optimization.

Pretrain fits the density radiance field (encoder + density + color heads)
under the density rendering loss plus masked depth supervision. Transfer
starts from that checkpoint, adds a fresh occupancy head, and tunes encoder,
color, density and occupancy jointly under the combined objective: both
rendering losses, bootstrap distillation (first `warmup_steps` only), the
Gaussian weight supervision at secant-located surface hits, and normal
smoothing.

All per-step randomness derives from (seed, phase, step), so runs are
bitwise reproducible and checkpoints resume the exact trajectory.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evalkit
from .autodiff import Tensor
from .cameras import all_pixels, gen_rays
from .checkpoint import CheckpointData, arch_hash_for, load_checkpoint, save_checkpoint
from .fields import FieldBundle, ModelConfig
from .losses import (LossWeights, WidthSchedule, loss_bootstrap, loss_depth,
                     loss_normal_batch, loss_vol, loss_weight_batch,
                     sample_normal_perturbations, schedule_width, total_loss)
from .renderer import SamplingConfig, render_image, render_rays, sample_rays
from .surface import find_flips_batch, secant_roots_batch
from .synth import DEPTH_SENTINEL, render_view

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_HEADER = ("step,lr,loss_total,loss_vol_o,loss_vol_sigma,loss_o,loss_w,"
              "loss_normal,loss_depth,a_width,hit_fraction")

_PHASE_CODES = {"pretrain": 1, "transfer": 2}


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    steps: int = 3000                 # transfer default: 5400
    rays_per_batch: int = 128
    batch_size: int = 1
    learning_rate: float = 5e-4
    lr_schedule: str = "cosine"
    n_coarse: int = 96
    n_fine: int = 32
    seed: int = 0
    checkpoint_every: int = 1000
    tune_encoder: bool = True
    foreground_floor: float = 0.25
    loss_weights: LossWeights = field(default_factory=LossWeights)
    width_schedule: WidthSchedule = field(default_factory=WidthSchedule)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps <= 0 or self.rays_per_batch <= 0:
            raise ValueError("steps and rays_per_batch must be positive")
        if self.phase not in _PHASE_CODES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.n_coarse, self.n_fine, jitter=True)


# ---------------------------------------------------------------------------
# optimizer


def adam_init(params: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()}}


def adam_step(params: dict, state: dict, lr: float) -> None:
    """Bias-corrected adaptive update; missing grads count as zero."""
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        dt = p.data.dtype.type
        b1, b2 = dt(ADAM_BETA1), dt(ADAM_BETA2)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (dt(1) - b1) * g
        v *= b2
        v += (dt(1) - b2) * (g * g)
        m_hat = m / (dt(1) - b1 ** t)
        v_hat = v / (dt(1) - b2 ** t)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(ADAM_EPS))


def cosine_lr(k: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * k / total))."""
    if not 0 <= k <= total_steps:
        raise ValueError(f"step {k} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * k / total_steps)))


def step_rng(seed: int, phase: str, step: int) -> np.random.Generator:
    """Stateless per-step generator: resuming a run replays the sequence."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, _PHASE_CODES[phase], step]))


# ---------------------------------------------------------------------------
# ray bookkeeping


class RayStore:
    """Flattened rays, colors and depths of every training view."""

    def __init__(self, scene):
        origins, dirs, rgb, depth = [], [], [], []
        for i, camera in enumerate(scene.cameras):
            px = all_pixels(camera)
            o, d = gen_rays(camera, px)
            origins.append(o)
            dirs.append(d)
            rgb.append(scene.images[i].reshape(-1, 3))
            depth.append(scene.depths[i].reshape(-1))
        self.origins = np.concatenate(origins, axis=0)
        self.dirs = np.concatenate(dirs, axis=0)
        self.rgb = np.concatenate(rgb, axis=0).astype(np.float64)
        self.depth = np.concatenate(depth, axis=0).astype(np.float64)
        self.foreground = np.nonzero(self.depth != DEPTH_SENTINEL)[0]

    def pick_batch(self, rng, n_rays: int, foreground_floor: float) -> np.ndarray:
        """Uniform pixel draw with a guaranteed foreground fraction."""
        n_fg = int(np.ceil(foreground_floor * n_rays))
        fg = self.foreground[rng.integers(0, len(self.foreground), n_fg)]
        rest = rng.integers(0, len(self.depth), n_rays - n_fg)
        return np.concatenate([fg, rest])


@dataclass
class StepContext:
    """Everything a training step treats as constant: the ray batch, frozen
    sample positions, surface roots and loss targets."""
    k: int
    origins: np.ndarray
    dirs: np.ndarray
    ts: np.ndarray
    gt_rgb: np.ndarray
    gt_depth: np.ndarray
    gt_hit: np.ndarray
    hit_mask: np.ndarray | None = None
    t_star: np.ndarray | None = None
    x_star: np.ndarray | None = None
    eps: np.ndarray | None = None
    width: float = 1.0


def prepare_context(scene, bundle, store: RayStore, cfg: TrainConfig,
                    k: int, transfer: bool) -> StepContext:
    rng = step_rng(cfg.seed, cfg.phase, k)
    idx = store.pick_batch(rng, cfg.rays_per_batch, cfg.foreground_floor)
    origins = store.origins[idx]
    dirs = store.dirs[idx]
    ts, _ = sample_rays(scene, bundle, origins, dirs, cfg.sampling(), rng)
    ctx = StepContext(k=k, origins=origins, dirs=dirs, ts=ts,
                      gt_rgb=store.rgb[idx], gt_depth=store.depth[idx],
                      gt_hit=store.depth[idx] != DEPTH_SENTINEL)
    if transfer:
        ctx.eps = sample_normal_perturbations(ts.shape[0], rng)
        ctx.width = schedule_width(k, cfg.width_schedule)
    return ctx


def locate_hits(scene, bundle, ctx: StepContext, occ_values: np.ndarray) -> None:
    """Fill the context with flip brackets refined by the secant iteration.

    Roots are constants for the remainder of the step: a context keeps its
    first located hits, so re-evaluating the losses (finite-difference
    probes) sees frozen roots.
    """
    occ = occ_values.astype(np.float64)
    n_rays = occ.shape[0]
    flips = find_flips_batch(occ)
    hit = flips >= 0
    t_star = np.full(n_rays, scene.near)
    if hit.any():
        rows = np.nonzero(hit)[0]
        kk = flips[rows]
        h_origins = ctx.origins[rows]
        h_dirs = ctx.dirs[rows]

        def occ_at(tvec):
            with ad.no_tape():
                p = h_origins + tvec[:, None] * h_dirs
                return bundle.occupancy_at(p, scene).astype(np.float64)

        t_star[rows] = secant_roots_batch(
            occ_at, ctx.ts[rows, kk], ctx.ts[rows, kk + 1],
            occ[rows, kk], occ[rows, kk + 1])
    ctx.hit_mask = hit
    ctx.t_star = t_star
    ctx.x_star = ctx.origins + t_star[:, None] * ctx.dirs


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype))


def _scatter_rows(values: Tensor, rows: np.ndarray, n_rays: int) -> Tensor:
    """Place a hit-subset vector into a full-batch per-ray vector."""
    scatter = np.zeros((len(rows), n_rays), dtype=values.dtype.type)
    scatter[np.arange(len(rows)), rows] = 1.0
    out = ad.matmul(ad.reshape(values, (1, len(rows))), Tensor(scatter))
    return ad.reshape(out, (n_rays,))


def compute_losses(bundle, scene, ctx: StepContext, weights: LossWeights,
                   transfer: bool):
    """Differentiable loss terms for one step; returns (total, terms dict,
    metrics dict). Everything in `ctx` is treated as constant."""
    modes = ("density", "occupancy") if transfer else ("density",)
    outs = render_rays(scene, bundle, ctx.origins, ctx.dirs, None, None,
                       modes=modes, ts=ctx.ts)
    den = outs["density"]
    n_rays = ctx.ts.shape[0]
    dt = den.color.dtype.type

    terms = {"vol_sigma": loss_vol(den.color, ctx.gt_rgb),
             "depth": loss_depth(den.depth, ctx.gt_depth, ctx.gt_hit)}
    metrics = {"hit_fraction": 0.0, "boot_gap": 0.0}

    if transfer:
        occ = outs["occupancy"]
        terms["vol_o"] = loss_vol(occ.color, ctx.gt_rgb)
        alphas_const = den.alphas.data.copy()
        terms["bootstrap"] = loss_bootstrap(occ.alphas, alphas_const)
        if ctx.hit_mask is None:
            locate_hits(scene, bundle, ctx, occ.alphas.data)
        terms["weight"] = loss_weight_batch(occ.weights, ctx.ts, ctx.t_star,
                                            ctx.hit_mask, ctx.width)
        rows = np.nonzero(ctx.hit_mask)[0]
        if rows.size:
            def occ_fn(pts):
                return bundle.decode_occupancy(bundle.encode(pts, scene))

            ln_hit = loss_normal_batch(occ_fn, ctx.x_star[rows], ctx.eps[rows],
                                       np.ones(rows.size, dtype=bool))
            terms["normal"] = _scatter_rows(ln_hit, rows, n_rays)
        else:
            terms["normal"] = _zeros(n_rays, dt)
        metrics["hit_fraction"] = float(ctx.hit_mask.mean())
        metrics["boot_gap"] = float(np.abs(occ.alphas.data - alphas_const).mean())
    else:
        for key in ("vol_o", "bootstrap", "weight", "normal"):
            terms[key] = _zeros(n_rays, dt)

    total = total_loss(terms, weights, ctx.k)
    for key, term in terms.items():
        metrics[f"loss_{key}"] = float(term.data.mean())
    metrics["loss_total"] = float(total.data)
    return total, terms, metrics


# ---------------------------------------------------------------------------
# training loops


class TrainLog:
    def __init__(self, path: str | None):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w") as f:
                f.write(LOG_HEADER + "\n")

    def write(self, step: int, lr: float, metrics: dict, width: float):
        if not self.path:
            return
        row = [step, f"{lr:.8g}", f"{metrics['loss_total']:.8g}",
               f"{metrics['loss_vol_o']:.8g}", f"{metrics['loss_vol_sigma']:.8g}",
               f"{metrics['loss_bootstrap']:.8g}", f"{metrics['loss_weight']:.8g}",
               f"{metrics['loss_normal']:.8g}", f"{metrics['loss_depth']:.8g}",
               f"{width:.8g}", f"{metrics['hit_fraction']:.8g}"]
        with open(self.path, "a") as f:
            f.write(",".join(str(v) for v in row) + "\n")


def _trainable_groups(cfg: TrainConfig, transfer: bool):
    if not transfer:
        return ("encoder", "sigma", "color")
    groups = ["sigma", "color", "occupancy"]
    if cfg.tune_encoder:
        groups.insert(0, "encoder")
    return tuple(groups)


def _checkpoint_of(bundle, groups, moments, step, phase) -> CheckpointData:
    params = {k: v.data.copy() for k, v in bundle.parameters(groups).items()}
    shapes = {k: v.shape for k, v in params.items()}
    return CheckpointData(
        params=params, moments=moments, step=step, phase=phase,
        precision=str(np.dtype(bundle.dtype)),
        arch_hash=arch_hash_for(bundle.config.to_dict(), shapes),
        model_config=bundle.config.to_dict())


def build_bundle_from_checkpoint(ck: CheckpointData, seed: int = 0) -> FieldBundle:
    """Reconstruct a bundle; parameters absent from the checkpoint (the
    occupancy head of a pretrain checkpoint) keep their seeded init."""
    dtype = np.float32 if ck.precision == "float32" else np.float64
    bundle = FieldBundle(ModelConfig.from_dict(ck.model_config), seed=seed, dtype=dtype)
    params = bundle.parameters()
    for name, value in ck.params.items():
        if name not in params:
            raise ValueError(f"checkpoint parameter {name} not in architecture")
        if params[name].shape != value.shape:
            raise ValueError(f"checkpoint parameter {name} has shape {value.shape}, "
                             f"expected {params[name].shape}")
        params[name].data = value.astype(bundle.dtype).copy()
    return bundle


def _run_phase(scene, cfg: TrainConfig, bundle, out_path: str,
               log_path: str | None, hook, start_step: int, moments_in):
    from . import _kernels
    _kernels.set_flush_denormals()
    transfer = cfg.phase == "transfer"
    store = RayStore(scene)
    groups = _trainable_groups(cfg, transfer)
    trainables = bundle.parameters(groups)
    state = adam_init(trainables)
    if moments_in:
        for name in trainables:
            if name in moments_in:
                state["m"][name] = moments_in[name][0].copy()
                state["v"][name] = moments_in[name][1].copy()
        state["t"] = start_step

    log = TrainLog(log_path)
    t_begin = time.perf_counter()
    for k in range(start_step, cfg.steps):
        ctx = prepare_context(scene, bundle, store, cfg, k, transfer)
        with ad.tape() as tp:
            total, _, metrics = compute_losses(bundle, scene, ctx,
                                               cfg.loss_weights, transfer)
            if not np.isfinite(total.data):
                raise RuntimeError(f"non-finite loss at step {k}")
            tp.backward(total)
        lr = (cosine_lr(k, cfg.steps, cfg.learning_rate)
              if cfg.lr_schedule == "cosine" else cfg.learning_rate)
        adam_step(trainables, state, lr)
        for p in trainables.values():
            if not np.all(np.isfinite(p.data)):
                raise RuntimeError(f"non-finite parameter update at step {k}")
            p.zero_grad()
        log.write(k, lr, metrics, ctx.width if transfer else 0.0)
        if hook is not None:
            hook(k, metrics)
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0 and k + 1 < cfg.steps:
            moments = {n: (state["m"][n], state["v"][n]) for n in trainables}
            save_checkpoint(out_path + f".step{k + 1}",
                            _checkpoint_of(bundle, groups, moments, k + 1, cfg.phase))

    moments = {n: (state["m"][n], state["v"][n]) for n in trainables}
    save_groups = groups if not transfer else ("encoder", "sigma", "color", "occupancy")
    save_checkpoint(out_path, _checkpoint_of(bundle, save_groups, moments,
                                             cfg.steps, cfg.phase))
    return {"steps": cfg.steps, "seconds": time.perf_counter() - t_begin}


def run_pretrain(scene, cfg: TrainConfig, out_path: str,
                 log_path: str | None = None, hook=None,
                 resume: str | None = None) -> dict:
    """Optimize encoder, density and color heads under the density rendering
    and depth losses; returns a summary with held-out PSNR when the scene
    carries its analytic shape."""
    if cfg.phase != "pretrain":
        raise ValueError("config phase must be 'pretrain'")
    start, moments = 0, None
    if resume:
        ck = load_checkpoint(resume)
        bundle = build_bundle_from_checkpoint(ck, seed=cfg.seed)
        start, moments = ck.step, ck.moments
    else:
        bundle = FieldBundle(cfg.model, seed=cfg.seed)
    summary = _run_phase(scene, cfg, bundle, out_path, log_path, hook, start, moments)
    psnr = held_out_psnr(scene, bundle, cfg, mode="density")
    if psnr is not None:
        summary["held_out_psnr"] = psnr
    return summary


def run_transfer(scene, cfg: TrainConfig, init_checkpoint: str, out_path: str,
                 log_path: str | None = None, hook=None,
                 resume: str | None = None) -> dict:
    """Tune encoder, color, density and a fresh occupancy head under the
    combined objective, starting from a pretrain checkpoint."""
    if cfg.phase != "transfer":
        raise ValueError("config phase must be 'transfer'")
    start, moments = 0, None
    if resume:
        ck = load_checkpoint(resume)
        bundle = build_bundle_from_checkpoint(ck, seed=cfg.seed)
        start, moments = ck.step, ck.moments
    else:
        ck = load_checkpoint(init_checkpoint)
        expected = {k: v.shape
                    for k, v in FieldBundle(cfg.model, seed=0).parameters(
                        ("encoder", "sigma", "color")).items()}
        stated = arch_hash_for(cfg.model.to_dict(), expected)
        if ck.arch_hash != stated:
            raise ValueError(f"pretrain checkpoint architecture {ck.arch_hash} "
                             f"does not match transfer architecture {stated}")
        bundle = build_bundle_from_checkpoint(ck, seed=cfg.seed)
    summary = _run_phase(scene, cfg, bundle, out_path, log_path, hook, start, moments)
    psnr = held_out_psnr(scene, bundle, cfg, mode="occupancy")
    if psnr is not None:
        summary["held_out_psnr"] = psnr
    return summary


# ---------------------------------------------------------------------------
# held-out validation


def held_out_ring_camera(scene):
    """A camera halfway between the first two ring positions (same radius
    and height), looking at the origin."""
    e0 = scene.cameras[0].center
    e1 = scene.cameras[1].center
    az = 0.5 * (np.arctan2(e0[1], e0[0]) + np.arctan2(e1[1], e1[0]))
    rho = float(np.hypot(e0[0], e0[1]))
    eye = np.array([rho * np.cos(az), rho * np.sin(az), e0[2]])
    from .cameras import Camera, look_at
    ref = scene.cameras[0]
    return Camera(ref.fx, ref.fy, ref.cx, ref.cy, look_at(eye, (0, 0, 0)),
                  ref.width, ref.height)


def held_out_psnr(scene, bundle, cfg: TrainConfig, mode: str) -> float | None:
    if scene.shape is None:
        return None
    camera = held_out_ring_camera(scene)
    gt_image, gt_depth = render_view(scene.shape, camera, scene.light_dir,
                                     scene.near, scene.far)
    pred, _ = render_image(scene, bundle, camera, mode,
                           SamplingConfig(cfg.n_coarse, cfg.n_fine, False))
    mask = gt_depth != DEPTH_SENTINEL
    if not mask.any():
        return None
    return evalkit.psnr(pred, gt_image, mask)
