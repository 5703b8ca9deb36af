"""Control branch: a trainable copy of the U-Net encoder fed a mask-derived
condition, joined to a frozen base through zero-initialised 1x1x1 convs.

At initialisation the injected residuals are exactly zero, so the combined
model reproduces the base prediction.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_state, state_dict
from .diffusion import NoiseSchedule, UNet3d, UNetEncoder, diffusion_loss
from .nn import autograd as ag
from .nn.autograd import Var
from .nn.layers import Activation, Conv3d, LayerChain, parameter
from .nn.optim import AdamState, adam_step
from .vae import TrainingDiverged
from .volume import SegMask

N_LABELS = 128


class FrozenBaseError(RuntimeError):
    """An update touched a parameter of the frozen base."""


@dataclass
class CondEncoderConfig:
    factor: int = 4
    embed_dim: int = 8
    hidden: int = 16
    inpaint: bool = False


@dataclass
class ControlCond:
    c_f: np.ndarray

    @property
    def dims(self):
        return self.c_f.shape[2:]


class CondEncoder:
    """Label embedding, ``log2(f)`` stride-2 convs, optional masked-latent concat, 1x1 projection."""

    def __init__(self, cfg: CondEncoderConfig, latent_channels, rng):
        self.config = cfg
        levels = int(round(np.log2(cfg.factor)))
        if 2 ** levels != cfg.factor or levels < 1:
            raise ValueError(f"factor must be a power of two, got {cfg.factor}")
        self.table = parameter(rng.normal(0.0, 1.0, (N_LABELS, cfg.embed_dim)))
        layers, prev = [], cfg.embed_dim
        for _ in range(levels):
            layers += [Conv3d.init(prev, cfg.hidden, 3, 2, rng), Activation("silu")]
            prev = cfg.hidden
        self.down = LayerChain(layers)
        extra = latent_channels if cfg.inpaint else 0
        self.proj = Conv3d.init(prev + extra, latent_channels, 1, 1, rng)

    def named_params(self, prefix=""):
        out = {f"{prefix}table": self.table}
        out.update(self.down.named_params(f"{prefix}down."))
        out.update({f"{prefix}proj.{k}": v for k, v in self.proj.params().items()})
        return out

    def __call__(self, labels, masked_latent=None):
        h = self.down(ag.embedding(self.table, labels))
        if self.config.inpaint:
            if masked_latent is None:
                raise ValueError("inpaint mode needs a masked latent")
            h = ag.concat([h, np.asarray(masked_latent, np.float32)])
        return self.proj(h)


class ControlNetModel:
    def __init__(self, base: UNet3d, cond_config: CondEncoderConfig = None, rng=None):
        rng = np.random.default_rng(2) if rng is None else rng
        self.base = base
        self.cond_config = cond_config or CondEncoderConfig()
        cfg = base.config
        self.control_encoder = UNetEncoder(cfg, rng)
        # start from the base encoder weights
        load_state(self.control_encoder.named_params(),
                   {k: v.data.copy() for k, v in base.encoder.named_params().items()})
        w0, w1 = cfg.widths
        self.zero_convs = [Conv3d.init(w, w, 1, 1, zero=True) for w in (w0, w1, w1)]
        self.cond_encoder = CondEncoder(self.cond_config, cfg.latent_channels, rng)
        freeze(base)

    def named_params(self):
        """Trainable (control) parameters only."""
        out = self.control_encoder.named_params("control_encoder.")
        for i, zc in enumerate(self.zero_convs):
            out.update({f"zero_convs.{i}.{k}": v for k, v in zc.params().items()})
        out.update(self.cond_encoder.named_params("cond_encoder."))
        return out

    @property
    def config(self):
        return self.base.config

    def check_dims(self, shape):
        self.base.check_dims(shape)

    def to_checkpoint(self, base_hash: str):
        cfg = asdict(self.cond_config)
        return Checkpoint("control", cfg, state_dict(self.named_params()), {"base": base_hash})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, base: UNet3d, base_hash: str):
        if ckpt.links.get("base") != base_hash:
            raise CheckpointError("control checkpoint was trained against a different base "
                                  f"({ckpt.links.get('base')} != {base_hash})")
        cm = cls(base, CondEncoderConfig(**ckpt.config))
        load_state(cm.named_params(), ckpt.arrays)
        return cm


def freeze(model):
    for p in model.named_params().values():
        p.requires_grad = False
        p.grad = None


def param_checksum(model) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_params().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def cond_encode(cm: ControlNetModel, mask, masked_latent=None) -> Var:
    """Map a label volume (``SegMask`` or int array ``[d, h, w]``/``[n, d, h, w]``) to latent-grid features."""
    labels = mask.labels if isinstance(mask, SegMask) else np.asarray(mask)
    if labels.ndim == 3:
        labels = labels[None]
    f = cm.cond_config.factor
    if any(n % f for n in labels.shape[1:]):
        raise ValueError(f"mask dims {labels.shape[1:]} are not divisible by {f}")
    if labels.min() < 0 or labels.max() >= N_LABELS:
        raise ValueError(f"labels must lie in [0, {N_LABELS})")
    return cm.cond_encoder(labels.astype(np.int64), masked_latent)


def control_forward(cm: ControlNetModel, z_t, t, cond, c_f):
    """Base prediction with control features injected into the decoder skips."""
    z_t = ag.as_var(np.asarray(z_t, np.float32) if not isinstance(z_t, Var) else z_t)
    c_f = c_f.c_f if isinstance(c_f, ControlCond) else c_f
    c_f = ag.as_var(c_f)
    if c_f.data.shape[2:] != z_t.data.shape[2:]:
        raise ValueError(f"condition dims {c_f.data.shape[2:]} differ from latent dims {z_t.data.shape[2:]}")
    cm.check_dims(z_t.data.shape)
    emb = cm.base.embed(t, cond)
    feats = cm.control_encoder(ag.add(z_t, c_f), emb)
    residuals = [zc(f) for zc, f in zip(cm.zero_convs, feats)]
    return cm.base(z_t, t, cond, residuals=residuals)


def controlnet_loss(cm: ControlNetModel, sched: NoiseSchedule, z0, cond, c_f, t, eps) -> Var:
    return diffusion_loss(cm.base, sched, z0, cond, t, eps,
                          forward=lambda z, tt, c: control_forward(cm, z, tt, c, c_f))


def train_step_cn(cm: ControlNetModel, sched: NoiseSchedule, z0, cond, mask, opt: AdamState, rng,
                  masked_latent=None) -> dict:
    """One Adam step on the control parameters; the base must stay frozen."""
    base_params = list(cm.base.named_params().values())
    if any(p.requires_grad for p in base_params):
        raise FrozenBaseError("base parameters are trainable; call freeze(base) first")
    z0 = np.asarray(z0, np.float32)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    params = list(cm.named_params().values())
    for p in params:
        p.grad = None
    c_f = cond_encode(cm, mask, masked_latent)
    loss = controlnet_loss(cm, sched, z0, cond, c_f, t, eps)
    record = {"step": opt.step + 1, "t": t, "loss": float(loss.data), "lr": opt.lr_at(opt.step + 1)}
    if not np.isfinite(loss.data):
        raise TrainingDiverged("control loss is not finite", record)
    loss.backward()
    if any(p.grad is not None for p in base_params):
        raise FrozenBaseError("a gradient reached the frozen base")
    adam_step(opt, params, [p.grad for p in params])
    return record

