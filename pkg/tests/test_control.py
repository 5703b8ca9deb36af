import numpy as np
import pytest

from ctsynth import synthetic, training
from ctsynth.checkpoint import CheckpointError
from ctsynth.control import (ControlCond, ControlNetModel, FrozenBaseError, cond_encode, control_forward,
                             controlnet_loss, param_checksum, train_step_cn)
from ctsynth.diffusion import UNet3d, UNetConfig, default_schedule, diffusion_loss
from ctsynth.nn.optim import AdamState
from ctsynth.volume import PrimaryCond, encode_primary_cond


def trained_looking_base(seed=0):
    """Base U-Net with a nonzero output head, so predictions are not trivially zero."""
    base = UNet3d(UNetConfig(), np.random.default_rng(seed))
    r = np.random.default_rng(seed + 100)
    base.conv_out.weight.data[:] = r.normal(0, 0.05, base.conv_out.weight.data.shape)
    base.skip_in.weight.data[:] = r.normal(0, 0.2, base.skip_in.weight.data.shape)
    return base


COND = PrimaryCond.from_regions("chest", "abdomen", (1.5, 1.0, 1.0))


def random_labels(rng, dims=(32, 32, 32)):
    return rng.choice([0, 1, 3, 5, 10], size=dims).astype(np.uint16)


def test_zero_init_identity_is_bitwise(rng):
    cm = ControlNetModel(trained_looking_base())
    for _ in range(3):
        z = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
        t = int(rng.integers(1, 51))
        c_f = cond_encode(cm, random_labels(rng))
        a = control_forward(cm, z, t, COND, c_f).data
        b = cm.base(z, t, COND).data
        assert a.tobytes() == b.tobytes()


def test_perturbed_zero_conv_changes_output(rng):
    cm = ControlNetModel(trained_looking_base())
    z = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
    c_f = cond_encode(cm, random_labels(rng))
    for i in range(3):
        cm.zero_convs[i].weight.data[0, 0, 0, 0, 0] = 0.5
        diff = control_forward(cm, z, 9, COND, c_f).data - cm.base(z, 9, COND).data
        assert np.max(np.abs(diff)) > 1e-6, i
        cm.zero_convs[i].weight.data[:] = 0


def test_gradients_reach_control_but_not_base(rng):
    cm = ControlNetModel(trained_looking_base())
    for zc in cm.zero_convs:
        zc.weight.data[:] = 0.01  # let gradient pass back into the control encoder
    z0 = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    loss = controlnet_loss(cm, default_schedule(50), z0, COND, cond_encode(cm, random_labels(rng)), 12, eps)
    loss.backward()
    grads = {k: p.grad for k, p in cm.named_params().items()}
    assert all(g is not None for g in grads.values())
    for prefix in ("control_encoder.", "zero_convs.", "cond_encoder."):
        assert any(np.any(g != 0) for k, g in grads.items() if k.startswith(prefix)), prefix
    assert all(p.grad is None for p in cm.base.named_params().values())


def test_unfrozen_base_is_rejected(rng):
    cm = ControlNetModel(trained_looking_base())
    next(iter(cm.base.named_params().values())).requires_grad = True
    z0 = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
    with pytest.raises(FrozenBaseError):
        train_step_cn(cm, default_schedule(10), z0, COND, random_labels(rng), AdamState(), rng)


def test_cond_encode_dims_and_sensitivity(rng):
    cm = ControlNetModel(trained_looking_base())
    labels = random_labels(rng, (16, 32, 24))
    c_f = cond_encode(cm, labels).data
    assert c_f.shape == (1, 4, 4, 8, 6)
    assert ControlCond(c_f).dims == (4, 8, 6)
    other = labels.copy()
    other[5, 9, 13] = 127 if labels[5, 9, 13] != 127 else 1
    assert np.max(np.abs(cond_encode(cm, other).data - c_f)) > 0
    with pytest.raises(ValueError, match="divisible"):
        cond_encode(cm, np.zeros((6, 8, 8), np.int64))
    with pytest.raises(ValueError):
        cond_encode(cm, np.full((8, 8, 8), 128))
    with pytest.raises(ValueError, match="differ"):
        control_forward(cm, np.zeros((1, 4, 8, 8, 8), np.float32), 1, COND, c_f)


def test_background_mask_is_bias_only(rng):
    cm = ControlNetModel(trained_looking_base())
    enc = cm.cond_encoder
    enc.table.data[0] = 0
    background = np.zeros((16, 16, 16), np.int64)
    ref = cond_encode(cm, background).data
    # the first conv sees an all-zero input, so its weights and the other
    # table rows cannot matter
    enc.table.data[1:] = rng.normal(size=enc.table.data[1:].shape)
    conv0 = enc.down.layers[0]
    conv0.weight.data[:] = rng.normal(size=conv0.weight.data.shape)
    np.testing.assert_array_equal(cond_encode(cm, background).data, ref)
    conv0.bias.data[0] += 1.0
    assert np.max(np.abs(cond_encode(cm, background).data - ref)) > 0
    for layer in enc.down.layers + [enc.proj]:
        if hasattr(layer, "bias"):
            layer.bias.data[:] = 0
    np.testing.assert_array_equal(cond_encode(cm, background).data, 0.0)


def test_loss_at_init_equals_base_loss(rng):
    cm = ControlNetModel(trained_looking_base())
    s = default_schedule(50)
    z0 = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    c_f = cond_encode(cm, random_labels(rng))
    a = float(controlnet_loss(cm, s, z0, COND, c_f, 17, eps).data)
    b = float(diffusion_loss(cm.base, s, z0, COND, 17, eps).data)
    assert a == b


def test_checkpoint_links_to_base(rng):
    cm = ControlNetModel(trained_looking_base())
    ck = cm.to_checkpoint("a" * 64)
    clone = ControlNetModel.from_checkpoint(ck, cm.base, "a" * 64)
    for (k, p), (_, q) in zip(cm.named_params().items(), clone.named_params().items()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=k)
    with pytest.raises(CheckpointError, match="different base"):
        ControlNetModel.from_checkpoint(ck, cm.base, "b" * 64)


# -- paired seeded runs -------------------------------------------------------------------

@pytest.fixture(scope="module")
def mask_pairs():
    data = synthetic.blob_dataset(8, 0)
    return [(synthetic.mask_latent(m.labels), encode_primary_cond(ct.meta), m.labels) for ct, m in data]


def eval_draws(pairs, n=40, seed=99):
    r = np.random.default_rng(seed)
    draws = []
    for j in range(n):
        i = j % len(pairs)
        draws.append((i, int(r.integers(1, 51)), r.standard_normal(pairs[i][0].shape).astype(np.float32)))
    return draws


def test_control_training_beats_frozen_base(mask_pairs):
    cfg = training.RunConfig(seed=0)
    base, _, _ = training.train_dm(cfg, [(z, c) for z, c, _ in mask_pairs], steps=200)
    before = param_checksum(base)
    cm, records, _ = training.train_cn(cfg, base, mask_pairs, steps=300)
    assert param_checksum(base) == before
    assert len(records) == 300
    s = cfg.schedule()
    base_loss, cn_loss = [], []
    for i, t, eps in eval_draws(mask_pairs):
        z0, cond, labels = mask_pairs[i]
        base_loss.append(float(diffusion_loss(base, s, z0, cond, t, eps).data))
        cn_loss.append(float(controlnet_loss(cm, s, z0, cond, cond_encode(cm, labels), t, eps).data))
    print("base %.4f control %.4f" % (np.mean(base_loss), np.mean(cn_loss)))
    assert np.mean(cn_loss) < np.mean(base_loss)
