"""Desk-scale VAE-GAN volume compressor.

The encoder and decoder are plain ``LayerChain`` stacks, so the decoder can be
run through the split executor unchanged.  Training alternates one
discriminator update with one autoencoder update on the weighted sum of
L1 reconstruction, a perceptual term, KL regularisation and the generator
side of the adversarial game.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tsp
from .checkpoint import Checkpoint, load_state, state_dict
from .nn import autograd as ag
from .nn.autograd import Var
from .nn.layers import Activation, Conv3d, GroupNorm, LayerChain, Upsample
from .nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass
class VaeConfig:
    factor: int = 4
    latent_channels: int = 4
    widths: tuple = (8, 16)
    groups: int = 4
    in_channels: int = 1

    def __post_init__(self):
        self.widths = tuple(self.widths)
        levels = round(math.log2(self.factor))
        if 2 ** levels != self.factor or levels < 1:
            raise ValueError(f"downsample factor must be a power of two, got {self.factor}")
        if len(self.widths) != levels:
            raise ValueError(f"need one width per downsampling level ({levels}), got {self.widths}")

    @property
    def levels(self):
        return len(self.widths)


@dataclass
class LatentStats:
    mu: object
    logvar: object


@dataclass
class VaeLossWeights:
    w_recon: float = 1.0
    w_perceptual: float = 1.0
    w_kl: float = 1e-6
    w_adv: float = 0.5

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


class PyramidL1:
    """Perceptual stand-in: L1 at full, 1/2 and 1/4 resolution, averaged.

    Any callable ``(x: Var, y: Var) -> Var`` can replace it.
    """

    def __init__(self, levels=3):
        self.levels = levels

    def __call__(self, x, y):
        total = None
        for i in range(self.levels):
            if i:
                if min(x.data.shape[2:]) < 2:
                    break
                x, y = ag.avg_pool2(x), ag.avg_pool2(y)
            term = ag.l1(x, y)
            total = term if total is None else ag.add(total, term)
            used = i + 1
        return ag.scale(total, 1.0 / used)


class VaeModel:
    def __init__(self, config: VaeConfig, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = cfg = config
        w = cfg.widths
        enc = [Conv3d.init(cfg.in_channels, w[0], 3, 1, rng), Activation("silu")]
        prev = w[0]
        for width in w:
            enc += [Conv3d.init(prev, width, 3, 2, rng), GroupNorm.init(width, cfg.groups),
                    Activation("silu")]
            prev = width
        self.encoder = LayerChain(enc)
        self.mu_head = Conv3d.init(prev, cfg.latent_channels, 3, 1, rng)
        self.logvar_head = Conv3d.init(prev, cfg.latent_channels, 3, 1, rng)
        self.logvar_head.weight.data *= 0.1
        dec = [Conv3d.init(cfg.latent_channels, w[-1], 3, 1, rng),
               GroupNorm.init(w[-1], cfg.groups), Activation("silu")]
        prev = w[-1]
        for width in reversed((w[0],) + w[:-1]):
            dec += [Upsample(), Conv3d.init(prev, width, 3, 1, rng),
                    GroupNorm.init(width, cfg.groups), Activation("silu")]
            prev = width
        dec.append(Conv3d.init(prev, cfg.in_channels, 3, 1, rng))
        self.decoder = LayerChain(dec)

    @property
    def factor(self):
        return self.config.factor

    def named_params(self):
        out = {}
        out.update(self.encoder.named_params("encoder."))
        out.update({f"mu_head.{k}": v for k, v in self.mu_head.params().items()})
        out.update({f"logvar_head.{k}": v for k, v in self.logvar_head.params().items()})
        out.update(self.decoder.named_params("decoder."))
        return out

    def _check(self, shape):
        f = self.factor
        if any(n % f for n in shape[2:]):
            raise ValueError(f"spatial dims {tuple(shape[2:])} are not divisible by {f}")

    def latent_shape(self, shape):
        self._check(shape)
        f = self.factor
        return (shape[0], self.config.latent_channels) + tuple(n // f for n in shape[2:])

    def to_checkpoint(self, **links):
        return Checkpoint("vae", asdict(self.config), state_dict(self.named_params()), links)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint):
        model = cls(VaeConfig(**ckpt.config))
        load_state(model.named_params(), ckpt.arrays)
        return model


def encode(m: VaeModel, x) -> LatentStats:
    """Latent mean/log-variance; works on arrays (pure) or ``Var`` (recorded)."""
    if isinstance(x, Var):
        m._check(x.data.shape)
        h = m.encoder(x)
        return LatentStats(m.mu_head(h), m.logvar_head(h))
    m._check(x.shape)
    h = m.encoder.forward(x)
    return LatentStats(m.mu_head.forward(h), m.logvar_head.forward(h))


def reparameterize(stats: LatentStats, noise):
    if isinstance(stats.mu, Var):
        return ag.add(stats.mu, ag.mul(ag.exp(ag.scale(stats.logvar, 0.5)), noise))
    return stats.mu + np.exp(0.5 * stats.logvar) * noise


def decode(m: VaeModel, z):
    return m.decoder(z) if isinstance(z, Var) else m.decoder.forward(z)


def decode_tsp(m: VaeModel, z, n_segments: int, mode="sequential", workers=None):
    plan = tsp.plan_split(m.decoder, z.shape, n_segments)
    return tsp.execute_tsp(m.decoder, z, plan, mode, workers)


def kl_loss(stats: LatentStats):
    """Mean over elements of ``-0.5 (1 + logvar - mu^2 - exp(logvar))``."""
    if not isinstance(stats.mu, Var):
        mu, lv = np.asarray(stats.mu, np.float64), np.asarray(stats.logvar, np.float64)
        return float(np.mean(-0.5 * (1 + lv - mu * mu - np.exp(lv))))
    inner = ag.sub(ag.add(ag.square(stats.mu), ag.exp(stats.logvar)), stats.logvar)
    return ag.scale(ag.add(ag.mean(inner), -1.0), 0.5)


# -- discriminator ------------------------------------------------------------------

class Discriminator:
    """Patch discriminator producing per-patch probabilities."""

    def __init__(self, in_channels=1, widths=(8, 16), groups=4, rng=None):
        rng = np.random.default_rng(1) if rng is None else rng
        layers, prev = [], in_channels
        for i, width in enumerate(widths):
            layers.append(Conv3d.init(prev, width, 3, 2, rng))
            if i:
                layers.append(GroupNorm.init(width, groups))
            layers.append(Activation("leaky_relu"))
            prev = width
        layers.append(Conv3d.init(prev, 1, 3, 1, rng))
        self.chain = LayerChain(layers)

    def named_params(self):
        return self.chain.named_params("disc.")

    def __call__(self, x):
        return ag.activation(self.chain(ag.as_var(x)), "sigmoid")


def adv_losses(c: Discriminator, x, x_recon):
    """Discriminator and (non-saturating) generator losses.

    ``d_loss = -mean[log C(x) + log(1 - C(x_recon))]``,
    ``g_loss = -mean[log C(x_recon)]``; probabilities clamped to
    ``[1e-7, 1 - 1e-7]``.
    """
    p_real = c(x)
    p_fake = c(x_recon)
    hi = 1.0 - PROB_CLAMP
    d_terms = ag.add(ag.log_clamped(p_real, PROB_CLAMP, hi),
                     ag.log_clamped(ag.sub(1.0, p_fake), PROB_CLAMP, hi))
    d_loss = ag.scale(ag.mean(d_terms), -1.0)
    g_loss = ag.scale(ag.mean(ag.log_clamped(p_fake, PROB_CLAMP, hi)), -1.0)
    return {"d_loss": d_loss, "g_loss": g_loss}


def generator_adv_loss(c: Discriminator, x_recon):
    p_fake = c(x_recon)
    return ag.scale(ag.mean(ag.log_clamped(p_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)), -1.0)


@dataclass
class VaeLoss:
    total: Var
    components: dict = field(default_factory=dict)
    x_recon: Var = None


def vae_total_loss(m: VaeModel, c: Discriminator, x, weights: VaeLossWeights, noise,
                   perceptual=None, x_recon=None) -> VaeLoss:
    """Weighted autoencoder objective.

    ``x_recon`` overrides the decoder output (used to test the loss algebra on
    a forced reconstruction).
    """
    perceptual = perceptual or PyramidL1()
    xv = ag.as_var(np.asarray(x, dtype=np.float32))
    stats = encode(m, xv)
    if x_recon is None:
        x_recon = decode(m, reparameterize(stats, noise))
    x_recon = ag.as_var(x_recon)
    recon = ag.l1(x_recon, xv)
    perc = perceptual(x_recon, xv)
    kl = kl_loss(stats)
    parts = [(weights.w_recon, recon), (weights.w_perceptual, perc), (weights.w_kl, kl)]
    g_loss = None
    if weights.w_adv > 0:
        g_loss = generator_adv_loss(c, x_recon)
        parts.append((weights.w_adv, g_loss))
    total = None
    for w, term in parts:
        scaled = ag.scale(term, w)
        total = scaled if total is None else ag.add(total, scaled)
    comps = {"recon": float(recon.data), "perceptual": float(perc.data), "kl": float(kl.data),
             "g_loss": float(g_loss.data) if g_loss is not None else 0.0}
    return VaeLoss(total, comps, x_recon)


def _zero(params):
    for p in params:
        p.grad = None


def train_step_vae(m: VaeModel, c: Discriminator, batch, weights: VaeLossWeights,
                   opt_g: AdamState, opt_d: AdamState, rng, perceptual=None) -> dict:
    """One discriminator update followed by one autoencoder update."""
    batch = np.asarray(batch, dtype=np.float32)
    noise = rng.standard_normal(m.latent_shape(batch.shape)).astype(np.float32)
    g_params = list(m.named_params().values())
    d_params = list(c.named_params().values())

    record = {"step": opt_g.step + 1, "d_loss": 0.0, "lr": opt_g.lr_at(opt_g.step + 1)}
    if weights.w_adv > 0:
        x_recon = decode(m, reparameterize(encode(m, batch), noise))
        _zero(d_params)
        d_loss = adv_losses(c, batch, x_recon)["d_loss"]
        record["d_loss"] = float(d_loss.data)
        if not np.isfinite(d_loss.data):
            raise TrainingDiverged("discriminator loss is not finite", record)
        d_loss.backward()
        adam_step(opt_d, d_params, [p.grad for p in d_params])

    loss = vae_total_loss(m, c, batch, weights, noise, perceptual)
    record.update(loss.components)
    if not np.isfinite(loss.total.data):
        raise TrainingDiverged("autoencoder loss is not finite", record)
    _zero(g_params + d_params)
    loss.total.backward()
    adam_step(opt_g, g_params, [p.grad for p in g_params])
    _zero(d_params)
    return record


def latent_std(m: VaeModel, volumes, seed=0) -> float:
    """Standard deviation of sampled latents ``mu + sigma * eps`` over ``volumes``."""
    rng = np.random.default_rng(seed)
    zs = []
    for x in volumes:
        stats = encode(m, np.asarray(x, np.float32))
        zs.append(reparameterize(stats, rng.standard_normal(stats.mu.shape).astype(np.float32)).ravel())
    return float(np.std(np.concatenate(zs)))
