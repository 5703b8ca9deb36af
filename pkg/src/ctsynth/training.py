"""Run configuration and the three staged toy training loops (vae -> dm -> cn).

Each step draws from ``default_rng([seed, stage, step])``, so a run resumed
from a checkpoint follows exactly the trajectory of an uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import control, diffusion, synthetic, vae
from .checkpoint import CheckpointError, load_checkpoint, load_state, save_checkpoint, state_dict
from .nn.optim import AdamState
from .volume import CtVolume, SegMask, encode_primary_cond, normalize_hu, read_mvol

log = logging.getLogger(__name__)

STAGES = ("vae", "dm", "cn")
CKPT_NAMES = {"vae": "vae.ckpt", "dm": "unet.ckpt", "cn": "control.ckpt"}


class StageOrderError(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data
    data_dir: str = None
    n_volumes: int = 8
    volume_dims: tuple = (32, 32, 32)
    checkpoint_dir: str = "runs"
    ranges: str = None
    # models
    vae_factor: int = 4
    latent_channels: int = 4
    vae_widths: tuple = (8, 16)
    unet_widths: tuple = (16, 32)
    emb_dim: int = 32
    T: int = 50
    beta_min: float = None
    beta_max: float = None
    # optimisation
    lr_vae: float = 1e-3
    lr_dm: float = 3e-3
    lr_cn: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    power: float = 0.9
    steps_vae: int = 200
    steps_dm: int = 300
    steps_cn: int = 300
    batch_vae: int = 2
    w_recon: float = 1.0
    w_perceptual: float = 1.0
    w_kl: float = 3e-2
    w_adv: float = 0.5
    # generation
    tsp_threshold: int = 64 ** 3
    tsp_segments: int = 4
    workers: int = None

    def __post_init__(self):
        for name in ("volume_dims", "vae_widths", "unet_widths"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if (self.beta_min is None) != (self.beta_max is None):
            raise ValueError("set both beta_min and beta_max or neither")

    @classmethod
    def load(cls, path):
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        for name in ("data_dir", "ranges"):
            p = getattr(cfg, name)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"{name} path does not exist: {p}")
        return cfg

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def vae_config(self):
        return vae.VaeConfig(self.vae_factor, self.latent_channels, self.vae_widths)

    def unet_config(self):
        return diffusion.UNetConfig(self.latent_channels, self.unet_widths, self.emb_dim)

    def schedule(self):
        if self.beta_min is None:
            return diffusion.default_schedule(self.T)
        return diffusion.make_schedule(self.T, self.beta_min, self.beta_max)

    def loss_weights(self):
        return vae.VaeLossWeights(self.w_recon, self.w_perceptual, self.w_kl, self.w_adv)

    def adam(self, lr, steps):
        return AdamState(lr=lr, beta1=self.beta1, beta2=self.beta2, schedule="polynomial",
                         power=self.power, total_steps=steps)

    def ckpt_path(self, stage):
        return Path(self.checkpoint_dir) / CKPT_NAMES[stage]


def step_rng(seed, stage, step):
    return np.random.default_rng([seed, STAGES.index(stage), step])


# -- data ---------------------------------------------------------------------------

def load_dataset(cfg: RunConfig):
    """``[(CtVolume, SegMask or None)]`` from ``data_dir`` or the seeded phantom set.

    In a data directory each ``name.mvol`` CT pairs with an optional ``name.mask.mvol``.
    """
    if cfg.data_dir is None:
        return synthetic.blob_dataset(cfg.n_volumes, cfg.seed, cfg.volume_dims)
    items = []
    for path in sorted(Path(cfg.data_dir).glob("*.mvol")):
        if path.name.endswith(".mask.mvol"):
            continue
        ct = read_mvol(path)
        if not isinstance(ct, CtVolume):
            continue
        mpath = path.with_name(path.stem + ".mask.mvol")
        mask = read_mvol(mpath) if mpath.exists() else None
        if mask is not None and not isinstance(mask, SegMask):
            raise ValueError(f"{mpath} is not a mask")
        items.append((ct, mask))
    if not items:
        raise FileNotFoundError(f"no CT volumes in {cfg.data_dir}")
    return items


# -- optimizer state in checkpoints ----------------------------------------------------

def _opt_arrays(prefix, opt: AdamState):
    out = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}.{i}.m"] = m
        out[f"{prefix}.{i}.v"] = v
    return out


def _restore_opt(prefix, opt: AdamState, arrays, step):
    n = sum(1 for k in arrays if k.startswith(prefix + ".") and k.endswith(".m"))
    opt.m = [arrays[f"{prefix}.{i}.m"].copy() for i in range(n)]
    opt.v = [arrays[f"{prefix}.{i}.v"].copy() for i in range(n)]
    opt.step = step


def _split_arrays(arrays, prefixes):
    return {k: v for k, v in arrays.items() if not k.startswith(prefixes)}


def _end(steps, stop):
    """Last step (exclusive) of this invocation; ``stop`` halts early without changing the schedule."""
    return steps if stop is None else min(stop, steps)


def write_loss_csv(records, path, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_loss_csv(path):
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


VAE_COLUMNS = ["step", "recon", "perceptual", "kl", "d_loss", "g_loss", "lr"]
DM_COLUMNS = ["step", "t", "dims", "loss", "lr"]
CN_COLUMNS = ["step", "t", "loss", "lr"]


# -- stage 1: autoencoder -----------------------------------------------------------------

def train_vae(cfg: RunConfig, data, steps=None, resume=None, on_step=None, stop=None):
    """Returns ``(model, discriminator, records, opt_g, opt_d)``."""
    steps = cfg.steps_vae if steps is None else steps
    x = np.concatenate([normalize_hu(ct) for ct, _ in data])
    model = vae.VaeModel(cfg.vae_config(), np.random.default_rng([cfg.seed, 0]))
    disc = vae.Discriminator(rng=np.random.default_rng([cfg.seed, 1]))
    opt_g, opt_d = cfg.adam(cfg.lr_vae, steps), cfg.adam(cfg.lr_vae, steps)
    records, start = [], 0
    if resume is not None:
        start = int(resume.extra["step"])
        load_state(model.named_params(), _split_arrays(resume.arrays, ("opt_", "disc.")))
        load_state(disc.named_params(), {k: v for k, v in resume.arrays.items() if k.startswith("disc.")})
        _restore_opt("opt_g", opt_g, resume.arrays, start)
        _restore_opt("opt_d", opt_d, resume.arrays, start)
        records = list(resume.extra.get("records", []))
    weights = cfg.loss_weights()
    batch = min(cfg.batch_vae, len(x))
    for step in range(start, _end(steps, stop)):
        rng = step_rng(cfg.seed, "vae", step)
        idx = np.sort(rng.choice(len(x), batch, replace=False))
        rec = vae.train_step_vae(model, disc, x[idx], weights, opt_g, opt_d, rng)
        records.append(rec)
        if on_step:
            on_step(rec)
    return model, disc, records, opt_g, opt_d


def vae_checkpoint(cfg, model, disc, records, opt_g, opt_d):
    ck = model.to_checkpoint()
    ck.arrays.update(state_dict(disc.named_params()))
    ck.arrays.update(_opt_arrays("opt_g", opt_g))
    ck.arrays.update(_opt_arrays("opt_d", opt_d))
    ck.extra = {"step": opt_g.step, "seed": cfg.seed, "records": records}
    return ck


def load_vae(path):
    ck, digest = load_checkpoint(path, "vae")
    model = vae.VaeModel(vae.VaeConfig(**ck.config))
    load_state(model.named_params(), _split_arrays(ck.arrays, ("opt_", "disc.")))
    return model, digest, ck


# -- stage 2: diffusion -------------------------------------------------------------------

def encode_latents(model: vae.VaeModel, data):
    """Posterior means and primary conditions for every volume."""
    out = []
    for ct, _ in data:
        stats = vae.encode(model, normalize_hu(ct))
        out.append((stats.mu.astype(np.float32), encode_primary_cond(ct.meta)))
    return out


def train_dm(cfg: RunConfig, latents, steps=None, resume=None, on_step=None, stop=None):
    """Cycles through ``latents`` (batch 1, mixed dims allowed)."""
    steps = cfg.steps_dm if steps is None else steps
    unet = diffusion.UNet3d(cfg.unet_config(), np.random.default_rng([cfg.seed, 2]))
    sched = cfg.schedule()
    opt = cfg.adam(cfg.lr_dm, steps)
    records, start = [], 0
    if resume is not None:
        start = int(resume.extra["step"])
        load_state(unet.named_params(), _split_arrays(resume.arrays, ("opt_",)))
        _restore_opt("opt", opt, resume.arrays, start)
        records = list(resume.extra.get("records", []))
    for step in range(start, _end(steps, stop)):
        rng = step_rng(cfg.seed, "dm", step)
        z0, cond = latents[int(rng.integers(len(latents)))]
        rec = diffusion.train_step_dm(unet, sched, z0, cond, opt, rng)
        records.append(rec)
        if on_step:
            on_step(rec)
    return unet, records, opt


def load_unet(path):
    ck, digest = load_checkpoint(path, "unet")
    unet = diffusion.UNet3d(diffusion.UNetConfig(**ck.config))
    load_state(unet.named_params(), _split_arrays(ck.arrays, ("opt_",)))
    return unet, digest, ck


# -- stage 3: control ---------------------------------------------------------------------

def train_cn(cfg: RunConfig, base, pairs, steps=None, resume=None, on_step=None, stop=None):
    """``pairs`` are ``(latent, cond, labels)``; only control parameters change."""
    steps = cfg.steps_cn if steps is None else steps
    cm = control.ControlNetModel(base, control.CondEncoderConfig(factor=cfg.vae_factor),
                                 np.random.default_rng([cfg.seed, 3]))
    sched = cfg.schedule()
    opt = cfg.adam(cfg.lr_cn, steps)
    records, start = [], 0
    if resume is not None:
        start = int(resume.extra["step"])
        load_state(cm.named_params(), _split_arrays(resume.arrays, ("opt_",)))
        _restore_opt("opt", opt, resume.arrays, start)
        records = list(resume.extra.get("records", []))
    for step in range(start, _end(steps, stop)):
        rng = step_rng(cfg.seed, "cn", step)
        z0, cond, labels = pairs[int(rng.integers(len(pairs)))]
        rec = control.train_step_cn(cm, sched, z0, cond, labels, opt, rng)
        records.append(rec)
        if on_step:
            on_step(rec)
    return cm, records, opt


def load_control(path, base, base_hash):
    ck, digest = load_checkpoint(path, "control")
    if ck.links.get("base") != base_hash:
        raise CheckpointError(f"control checkpoint expects base {ck.links.get('base')}, got {base_hash}")
    cm = control.ControlNetModel(base, control.CondEncoderConfig(**ck.config))
    load_state(cm.named_params(), _split_arrays(ck.arrays, ("opt_",)))
    return cm, digest, ck


# -- stage chaining ----------------------------------------------------------------------

def require_stage(cfg: RunConfig, stage: str):
    """Hash-verified prerequisite checkpoints for ``stage``; raises ``StageOrderError``."""
    need = STAGES[:STAGES.index(stage)]
    for prev in need:
        if not cfg.ckpt_path(prev).exists():
            raise StageOrderError(f"stage order: {stage} needs a {prev} checkpoint at {cfg.ckpt_path(prev)}")
    out = {}
    if "vae" in need:
        out["vae"] = load_vae(cfg.ckpt_path("vae"))
    if "dm" in need:
        unet, digest, ck = load_unet(cfg.ckpt_path("dm"))
        if ck.links.get("vae") != out["vae"][1]:
            raise CheckpointError("dm checkpoint was trained against a different vae checkpoint")
        out["dm"] = (unet, digest, ck)
    return out


def run_stage(cfg: RunConfig, stage: str, steps=None, resume=False, stop=None):
    """Train one stage, writing its checkpoint and loss CSV; returns ``(path, hash, records)``.

    ``stop`` ends the run early at that step; a later ``resume`` continues it
    along the same trajectory as an uninterrupted run.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    prereq = require_stage(cfg, stage)
    path = cfg.ckpt_path(stage)
    prev = None
    if resume and path.exists():
        prev, _ = load_checkpoint(path, {"vae": "vae", "dm": "unet", "cn": "control"}[stage])
    data = load_dataset(cfg)
    if stage == "vae":
        model, disc, records, og, od = train_vae(cfg, data, steps, prev, stop=stop)
        ck, columns = vae_checkpoint(cfg, model, disc, records, og, od), VAE_COLUMNS
    elif stage == "dm":
        vmodel, vhash, _ = prereq["vae"]
        unet, records, opt = train_dm(cfg, encode_latents(vmodel, data), steps, prev, stop=stop)
        ck = unet.to_checkpoint(vae=vhash)
        ck.arrays.update(_opt_arrays("opt", opt))
        ck.extra = {"step": opt.step, "seed": cfg.seed, "records": records}
        columns = DM_COLUMNS
    else:
        vmodel, vhash, _ = prereq["vae"]
        unet, uhash, _ = prereq["dm"]
        if any(m is None for _, m in data):
            raise ValueError("cn stage needs a mask for every volume")
        pairs = [(z, c, m.labels) for (z, c), (_, m) in zip(encode_latents(vmodel, data), data)]
        cm, records, opt = train_cn(cfg, unet, pairs, steps, prev, stop=stop)
        ck = cm.to_checkpoint(uhash)
        ck.links["vae"] = vhash
        ck.arrays.update(_opt_arrays("opt", opt))
        ck.extra = {"step": opt.step, "seed": cfg.seed, "records": records}
        columns = CN_COLUMNS
    digest = save_checkpoint(path, ck)
    write_loss_csv(records, path.with_name(f"{stage}_losses.csv"), columns)
    return path, digest, records

