"""Latent diffusion: linear noise schedule, a small time- and region/spacing-
conditioned 3-D U-Net epsilon predictor, the L1 training objective and
ancestral sampling.

The U-Net works on latents of any spatial dims divisible by ``2**levels``, so
consecutive training steps may use different latent shapes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint, load_state, state_dict
from .nn import autograd as ag
from .nn import functional as F
from .nn.autograd import Var
from .nn.layers import Conv3d, GroupNorm, Linear
from .nn.optim import AdamState, adam_step
from .vae import TrainingDiverged
from .volume import PrimaryCond

log = logging.getLogger(__name__)

SPACING_REF_MM = 5.0
COND_DIM = 11


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def check_t(self, t):
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"t must lie in [1, {self.T}], got {t}")
        return int(t)


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear betas from ``beta_min`` to ``beta_max`` over ``T`` steps (float64)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64) if T > 1 else np.array([beta_min])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def default_schedule(T: int = 50) -> NoiseSchedule:
    """The (1e-4, 0.02) line with both endpoints scaled by ``300 / T``.

    The scaling pins the terminal ``alpha_bar_T`` near 0.04 for any ``T``:
    sampling can start from a unit normal, yet few steps are spent on
    near-pure noise.
    """
    k = 300.0 / T
    return make_schedule(T, min(1e-4 * k, 0.5), min(0.02 * k, 0.999))


def q_sample(sched: NoiseSchedule, z0, t, eps):
    t = sched.check_t(t)
    if np.shape(eps) != np.shape(z0):
        raise ValueError("eps and z0 differ in shape")
    ab = sched.alpha_bars[t - 1]
    return (math.sqrt(ab) * np.asarray(z0) + math.sqrt(1.0 - ab) * np.asarray(eps)).astype(np.float32)


def cond_vector(c: PrimaryCond) -> np.ndarray:
    """``[i_top | i_bottom | clip(s / 5 mm, 0, 1)]`` as an 11-vector."""
    s = np.clip(c.s / SPACING_REF_MM, 0.0, 1.0)
    return np.concatenate([c.i_top, c.i_bottom, s]).astype(np.float32)


# -- network --------------------------------------------------------------------

@dataclass
class UNetConfig:
    latent_channels: int = 4
    widths: tuple = (16, 32)
    emb_dim: int = 32
    groups: int = 4

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 2:
            raise ValueError("the desk U-Net has exactly two resolution levels")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")

    @property
    def levels(self):
        return len(self.widths)


class ResBlock:
    """GN-SiLU-conv, embedding-modulated GN (scale and shift), SiLU-conv, residual."""

    def __init__(self, c_in, c_out, emb_dim, groups, rng):
        self.norm1 = GroupNorm.init(c_in, groups)
        self.conv1 = Conv3d.init(c_in, c_out, 3, 1, rng)
        self.emb = Linear.init(emb_dim, 2 * c_out, rng)
        self.norm2 = GroupNorm.init(c_out, groups)
        self.conv2 = Conv3d.init(c_out, c_out, 3, 1, rng)
        self.skip = Conv3d.init(c_in, c_out, 1, 1, rng) if c_in != c_out else None

    def named_params(self, prefix):
        out = {}
        for name in ("norm1", "conv1", "emb", "norm2", "conv2", "skip"):
            layer = getattr(self, name)
            if layer is not None:
                out.update({f"{prefix}{name}.{k}": v for k, v in layer.params().items()})
        return out

    def __call__(self, x, emb):
        h = self.conv1(ag.activation(self.norm1(x), "silu"))
        c = h.data.shape[1]
        scale, shift = ag.split_channels(self.emb(emb), (c, c))
        h = ag.channel_affine(self.norm2(h), scale, shift)
        h = self.conv2(ag.activation(h, "silu"))
        return ag.add(x if self.skip is None else self.skip(x), h)


class UNetEncoder:
    """Input conv and the downward path; returns the two skip tensors and the bottom."""

    def __init__(self, cfg: UNetConfig, rng):
        w0, w1 = cfg.widths
        self.conv_in = Conv3d.init(cfg.latent_channels, w0, 3, 1, rng)
        self.block0 = ResBlock(w0, w0, cfg.emb_dim, cfg.groups, rng)
        self.down0 = Conv3d.init(w0, w1, 3, 2, rng)
        self.block1 = ResBlock(w1, w1, cfg.emb_dim, cfg.groups, rng)
        self.down1 = Conv3d.init(w1, w1, 3, 2, rng)
        self.mid = ResBlock(w1, w1, cfg.emb_dim, cfg.groups, rng)

    def named_params(self, prefix=""):
        out = {}
        for name in ("conv_in", "down0", "down1"):
            out.update({f"{prefix}{name}.{k}": v for k, v in getattr(self, name).params().items()})
        for name in ("block0", "block1", "mid"):
            out.update(getattr(self, name).named_params(f"{prefix}{name}."))
        return out

    def __call__(self, x, emb):
        s0 = self.block0(self.conv_in(x), emb)
        s1 = self.block1(self.down0(s0), emb)
        return s0, s1, self.mid(self.down1(s1), emb)


class UNet3d:
    """Epsilon predictor ``eps(z_t, t, c_p)`` with additive skips at two resolutions.

    The output conv and the input skip start at zero, so an untrained model
    predicts ``eps = 0``.

    ``residuals`` (optional: level-0 skip, level-1 skip, bottleneck) are added
    before the decoder consumes those tensors; this is the injection point for
    control branches.
    """

    def __init__(self, config: UNetConfig = None, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = cfg = config or UNetConfig()
        w0, w1 = cfg.widths
        e = cfg.emb_dim
        self.time_mlp = [Linear.init(e, e, rng), Linear.init(e, e, rng)]
        self.cond_mlp = [Linear.init(COND_DIM, e, rng), Linear.init(e, e, rng)]
        self.encoder = UNetEncoder(cfg, rng)
        self.up1 = Conv3d.init(w1, w1, 3, 1, rng)
        self.dec1 = ResBlock(w1, w1, e, cfg.groups, rng)
        self.up0 = Conv3d.init(w1, w0, 3, 1, rng)
        self.dec0 = ResBlock(w0, w0, e, cfg.groups, rng)
        self.norm_out = GroupNorm.init(w0, cfg.groups)
        self.conv_out = Conv3d.init(w0, cfg.latent_channels, 3, 1, rng, zero=True)
        # linear 1x1x1 path from z_t straight to the prediction; at high noise
        # eps is close to z_t itself, which the conv stack learns only slowly
        self.skip_in = Conv3d.init(cfg.latent_channels, cfg.latent_channels, 1, 1, rng, zero=True)

    def named_params(self):
        out = {}
        for i, lin in enumerate(self.time_mlp):
            out.update({f"time_mlp.{i}.{k}": v for k, v in lin.params().items()})
        for i, lin in enumerate(self.cond_mlp):
            out.update({f"cond_mlp.{i}.{k}": v for k, v in lin.params().items()})
        out.update(self.encoder.named_params("encoder."))
        for name in ("up1", "up0", "norm_out", "conv_out", "skip_in"):
            out.update({f"{name}.{k}": v for k, v in getattr(self, name).params().items()})
        out.update(self.dec1.named_params("dec1."))
        out.update(self.dec0.named_params("dec0."))
        return out

    def check_dims(self, shape):
        k = 2 ** self.config.levels
        if len(shape) != 5 or shape[1] != self.config.latent_channels:
            raise ValueError(f"expected [n, {self.config.latent_channels}, d, h, w], got {tuple(shape)}")
        if any(n % k for n in shape[2:]):
            raise ValueError(f"latent dims {tuple(shape[2:])} are not divisible by {k}")

    def embed(self, t, cond):
        """Time embedding plus the condition MLP output, ``[n, emb_dim]``."""
        t = np.atleast_1d(np.asarray(t))
        temb = np.stack([F.time_embedding(ti, self.config.emb_dim) for ti in t])
        h = self.time_mlp[1](ag.activation(self.time_mlp[0](temb), "silu"))
        if cond is not None:
            h = ag.add(h, encode_cond(self, cond))
        return h

    def __call__(self, z_t, t, cond=None, residuals=None):
        z_t = ag.as_var(z_t)
        self.check_dims(z_t.data.shape)
        emb = self.embed(t, cond)
        s0, s1, h = self.encoder(z_t, emb)
        if residuals is not None:
            s0 = ag.add(s0, residuals[0])
            s1 = ag.add(s1, residuals[1])
            h = ag.add(h, residuals[2])
        h = ag.add(self.up1(ag.upsample(h)), s1)
        h = self.dec1(h, emb)
        h = ag.add(self.up0(ag.upsample(h)), s0)
        h = self.dec0(h, emb)
        return ag.add(self.conv_out(ag.activation(self.norm_out(h), "silu")), self.skip_in(z_t))

    def predict(self, z_t, t, cond=None) -> np.ndarray:
        return self(np.asarray(z_t, np.float32), t, cond).data

    def to_checkpoint(self, **links):
        return Checkpoint("unet", asdict(self.config), state_dict(self.named_params()), links)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint):
        model = cls(UNetConfig(**ckpt.config))
        load_state(model.named_params(), ckpt.arrays)
        return model


def encode_cond(model: UNet3d, cond):
    """Condition MLP over the 11-vector(s); accepts a ``PrimaryCond``, a list, or raw vectors."""
    if isinstance(cond, PrimaryCond):
        vec = cond_vector(cond)[None]
    elif isinstance(cond, (list, tuple)):
        vec = np.stack([cond_vector(c) for c in cond])
    else:
        vec = np.atleast_2d(np.asarray(cond, np.float32))
    l0, l1 = model.cond_mlp
    return l1(ag.activation(l0(vec), "silu"))


# -- objective and sampling --------------------------------------------------------

def diffusion_loss(model, sched: NoiseSchedule, z0, cond, t, eps, forward=None) -> Var:
    """Mean ``|eps - model(q_sample(z0, t, eps), t, cond)|``.

    ``forward`` replaces the model call, e.g. with a control-augmented one.
    """
    z_t = q_sample(sched, z0, t, eps)
    pred = (forward or model)(z_t, t, cond)
    return ag.l1(pred, np.asarray(eps, np.float32))


def ddpm_sample_step(model, sched: NoiseSchedule, z_t, t, cond, noise=None, forward=None):
    """One ancestral step ``z_t -> z_{t-1}`` (posterior mean plus posterior noise, none at t=1)."""
    t = sched.check_t(t)
    eps = (forward or model)(np.asarray(z_t, np.float32), t, cond).data.astype(np.float64)
    beta, alpha, ab = sched.betas[t - 1], sched.alphas[t - 1], sched.alpha_bars[t - 1]
    mean = (np.asarray(z_t, np.float64) - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
    if t > 1:
        if noise is None:
            raise ValueError("noise is required for t > 1")
        var = beta * (1.0 - sched.alpha_bars[t - 2]) / (1.0 - ab)
        mean = mean + math.sqrt(var) * np.asarray(noise, np.float64)
    return mean.astype(np.float32)


def generate(model, sched: NoiseSchedule, latent_dims, cond, seed: int, forward=None):
    """Run ``t = T .. 1`` from a seeded unit-normal ``z_T``; deterministic given the seed."""
    c = model.config.latent_channels
    shape = (1, c) + tuple(int(n) for n in latent_dims)
    model.check_dims(shape)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape).astype(np.float32)
    for t in range(sched.T, 0, -1):
        noise = rng.standard_normal(shape).astype(np.float32) if t > 1 else None
        z = ddpm_sample_step(model, sched, z, t, cond, noise, forward)
    return z


def train_step_dm(model: UNet3d, sched: NoiseSchedule, z0, cond, opt: AdamState, rng) -> dict:
    """One Adam step on the L1 epsilon objective for a single latent (batch 1)."""
    z0 = np.asarray(z0, np.float32)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    params = list(model.named_params().values())
    loss = diffusion_loss(model, sched, z0, cond, t, eps)
    record = {"step": opt.step + 1, "t": t, "dims": "x".join(map(str, z0.shape[2:])),
              "loss": float(loss.data), "lr": opt.lr_at(opt.step + 1)}
    if not np.isfinite(loss.data):
        raise TrainingDiverged("diffusion loss is not finite", record)
    for p in params:
        p.grad = None
    loss.backward()
    adam_step(opt, params, [p.grad for p in params])
    return record
