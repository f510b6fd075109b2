"""Conditioned implicit field networks.

A point is described by pooled statistics of its projections into the source
views (mean/variance per RGB channel plus a validity fraction) concatenated
with a positional encoding. An encoder MLP maps this to a feature vector,
which three decoder heads consume: density (softplus, >= 0), view-dependent
color (sigmoid, [0,1]^3) and occupancy (sigmoid, strictly in (0,1)).

Naming note: the density head decodes density and the color head decodes
color; two equations in the source literature swap the symbols g_sigma/g_c
relative to their prose, and this module follows the prose semantics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import project


@dataclass
class ModelConfig:
    pos_bands: int = 6
    dir_bands: int = 4
    encoder_width: int = 64
    encoder_layers: int = 2
    decoder_width: int = 64
    decoder_layers: int = 2
    feature_dim: int = 64
    occupancy_bias: float = -2.0   # empty-space prior at initialization
    activation: str = "softplus"

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def posenc(x, n_bands: int) -> np.ndarray:
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]
    per coordinate; output width = input width * 2 * n_bands."""
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    chunks = []
    for band in range(n_bands):
        arg = (np.pi * (2.0 ** band)) * x
        chunks.append(np.sin(arg))
        chunks.append(np.cos(arg))
    out = np.concatenate(chunks, axis=1)
    return out[0] if single else out


def sample_bilinear(image: np.ndarray, uv):
    """Bilinear lookup at pixel-center coordinates with border clamping.

    Out-of-image queries return zeros with a False validity bit.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    h, w = image.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (uc - u0)[:, None]
    fv = (vc - v0)[:, None]

    out = ((1 - fu) * (1 - fv) * image[v0, u0]
           + fu * (1 - fv) * image[v0, u1]
           + (1 - fu) * fv * image[v1, u0]
           + fu * fv * image[v1, u1])
    out = out * valid[:, None]
    if single:
        return out[0], bool(valid[0])
    return out, valid


def pooled_view_stats(points, scene) -> np.ndarray:
    """Per-point (mean RGB, variance RGB, validity fraction) across views.

    Pooling is symmetric in the view order; views behind the point or whose
    projection falls outside the image are excluded. Points visible in no
    view get all-zero stats.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_views = scene.n_views
    vals = np.zeros((n_views, pts.shape[0], 3))
    valid = np.zeros((n_views, pts.shape[0]))
    for i in range(n_views):
        uv, _, in_front = project(pts, scene.cameras[i])
        rgb, ok = sample_bilinear(scene.images[i], uv)
        ok = ok & in_front
        vals[i] = rgb * ok[:, None]
        valid[i] = ok
    count = valid.sum(axis=0)
    safe = np.maximum(count, 1.0)
    mean = vals.sum(axis=0) / safe[:, None]
    second = (vals * vals).sum(axis=0) / safe[:, None]
    var = np.maximum(second - mean * mean, 0.0)
    return np.concatenate([mean, var, (count / n_views)[:, None]], axis=1)


class MLP:
    """Fully connected stack with a configurable output squashing."""

    def __init__(self, name: str, in_dim: int, widths, out_dim: int, rng,
                 dtype, activation: str = "softplus", out: str | None = None,
                 final_bias: float = 0.0):
        self.name = name
        self.activation = activation
        self.out = out
        self.layers = []
        dims = [in_dim, *widths, out_dim]
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / (din + dout))
            w = Tensor(rng.normal(0.0, scale, size=(din, dout)).astype(dtype),
                       requires_grad=True)
            b = np.zeros(dout, dtype=dtype)
            if i == len(dims) - 2:
                b += dtype(final_bias)
            self.layers.append((w, Tensor(b, requires_grad=True)))

    def __call__(self, x: Tensor) -> Tensor:
        act = ad.softplus if self.activation == "softplus" else ad.relu
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = ad.add(ad.matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = act(h)
        if self.out == "sigmoid":
            h = ad.sigmoid(h)
        elif self.out == "softplus":
            h = ad.softplus(h)
        return h

    def parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out


class FieldBundle:
    """Encoder head plus density/color/occupancy decoders."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1E1D]))
        stat_dim = 7  # mean(3) + variance(3) + validity(1)
        enc_in = stat_dim + 6 * config.pos_bands
        enc_widths = [config.encoder_width] * config.encoder_layers
        dec_widths = [config.decoder_width] * config.decoder_layers
        self.encoder = MLP("encoder", enc_in, enc_widths, config.feature_dim,
                           rng, self.dtype, config.activation)
        self.sigma = MLP("sigma", config.feature_dim, dec_widths, 1,
                         rng, self.dtype, config.activation, out="softplus")
        self.color = MLP("color", config.feature_dim + 6 * config.dir_bands,
                         dec_widths, 3, rng, self.dtype, config.activation,
                         out="sigmoid")
        self.occupancy = MLP("occupancy", config.feature_dim, dec_widths, 1,
                             rng, self.dtype, config.activation, out="sigmoid",
                             final_bias=config.occupancy_bias)

    def parameters(self, groups=("encoder", "sigma", "color", "occupancy")) -> dict:
        out = {}
        for g in groups:
            out.update(getattr(self, g).parameters())
        return out

    def arch_hash(self) -> str:
        desc = {"config": self.config.to_dict(),
                "params": {k: list(v.shape) for k, v in self.parameters().items()}}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]

    # --- field evaluation -------------------------------------------------

    def encode(self, points, scene, view_dirs=None) -> Tensor:
        """Feature vectors for world points conditioned on the source views.

        `view_dirs` is accepted for interface symmetry but unused: the
        feature is direction-free; view dependence enters in decode_color.
        """
        stats = pooled_view_stats(points, scene).astype(self.dtype)
        pts = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        pe = posenc(pts, self.config.pos_bands)
        net_in = Tensor(np.concatenate([stats, pe], axis=1, dtype=self.dtype))
        return self.encoder(net_in)

    def decode_sigma(self, features: Tensor) -> Tensor:
        return self.sigma(features)

    def decode_color(self, features: Tensor, view_dirs) -> Tensor:
        pe = posenc(np.asarray(view_dirs).reshape(-1, 3), self.config.dir_bands)
        net_in = ad.concat([features, Tensor(pe.astype(self.dtype))], axis=1)
        return self.color(net_in)

    def decode_occupancy(self, features: Tensor) -> Tensor:
        return self.occupancy(features)

    # --- convenience numpy paths (no tape) ---------------------------------

    def occupancy_at(self, points, scene) -> np.ndarray:
        """Occupancy values as a flat numpy array (evaluation helper)."""
        if np.asarray(points).size == 0:
            return np.zeros(0, dtype=self.dtype)
        return self.decode_occupancy(self.encode(points, scene)).data.reshape(-1)

    def sigma_at(self, points, scene) -> np.ndarray:
        if np.asarray(points).size == 0:
            return np.zeros(0, dtype=self.dtype)
        return self.decode_sigma(self.encode(points, scene)).data.reshape(-1)
