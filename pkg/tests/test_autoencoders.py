import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masan.autoencoders import (EncoderConfig, FunctionalPatchModule, LossConfig, StructuralPatchModule,
                                modality_recon_loss, sparsity_penalty)
from masan.gradcheck import check_gradients
from masan.optim import AdamState, adam_step
from masan.tensor import ShapeError, Tape, Tensor, backward, no_tape

SMALL = EncoderConfig.for_patch(8, 2, channel_schedule=(4, 8, 8), bottleneck_channels=4)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def test_default_schedule_on_16_cube_patch():
    cfg = EncoderConfig()
    spm = StructuralPatchModule(cfg, 1, np.random.default_rng(0))
    with no_tape():
        e = spm.encode(Tensor(np.random.default_rng(1).standard_normal((1, 1, 1, 16, 16, 16))))
        rec = spm.decode(e)
    assert e.h.shape == (1, 1, 64, 2, 2, 2)
    # skips are the features entering each downsampling stage, shallow to deep
    assert [s.shape[2:] for s in e.skips] == [(32, 16, 16, 16), (64, 8, 8, 8), (128, 4, 4, 4)]
    assert rec.shape == (1, 1, 1, 16, 16, 16)


def test_init_conv_keeps_extents():
    # the full 240x256x176 volume is too large for a unit test; same-padding
    # arithmetic is checked on a smaller odd-shaped volume and by formula
    spm = StructuralPatchModule(EncoderConfig(), 1, np.random.default_rng(0))
    y = spm.init(Tensor(np.zeros((1, 1, 1, 12, 16, 10))))
    assert y.shape == (1, 1, 32, 12, 16, 10)
    assert tuple((e + 2 - 3) // 1 + 1 for e in (240, 256, 176)) == (240, 256, 176)


def test_for_patch_picks_depth():
    assert EncoderConfig.for_patch(16).num_downsamples == 3
    assert EncoderConfig.for_patch(4).num_downsamples == 1
    assert EncoderConfig.for_patch(4).channel_schedule == (32, 64)
    with pytest.raises(ValueError):
        EncoderConfig.for_patch(6)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(num_downsamples=2)
    with pytest.raises(ValueError):
        EncoderConfig(num_downsamples=0, channel_schedule=(32,))
    with pytest.raises(ValueError):
        LossConfig(lam=-1)


def test_identical_patches_encode_identically():
    rng = np.random.default_rng(2)
    spm = StructuralPatchModule(SMALL, 1, rng, name="s")
    x = rng.standard_normal((1, 1, 1, 8, 8, 8))
    with no_tape():
        a = spm.encode(Tensor(x)).h.data
        b = spm.encode(Tensor(np.concatenate([x, x], axis=1))).h.data
    assert np.array_equal(b[:, 0], b[:, 1])
    np.testing.assert_allclose(a[:, 0], b[:, 0], atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([4, 8]), st.integers(1, 3), st.integers(1, 2))
def test_decode_restores_input_shape(extent, n, frames):
    cfg = EncoderConfig.for_patch(extent, 2, channel_schedule=(2,) * (int(np.log2(extent)) ), bottleneck_channels=2)
    rng = np.random.default_rng(extent + n)
    fpm = FunctionalPatchModule(cfg, 2, rng, frames=frames)
    x = rand(rng, 2, n, frames, 1, extent, extent, extent)
    with no_tape():
        e = fpm.encode(x)
        y = fpm.decode(e)
    assert y.shape == x.shape
    assert e.h.shape[3:] == (2, 2, 2)


def test_bottleneck_requires_divisible_extents():
    spm = StructuralPatchModule(SMALL, 1, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        spm.encode(Tensor(np.zeros((1, 1, 1, 6, 8, 8))))


def test_decode_rejects_wrong_skip_count():
    rng = np.random.default_rng(0)
    spm = StructuralPatchModule(SMALL, 1, rng)
    with no_tape():
        e = spm.encode(rand(rng, 1, 1, 1, 8, 8, 8))
    e.skips.pop()
    with pytest.raises(ShapeError):
        spm.decode(e)


def test_single_frame_fpm_equals_spm():
    spm = StructuralPatchModule(SMALL, 2, np.random.default_rng(9))
    fpm = FunctionalPatchModule(SMALL, 2, np.random.default_rng(9), frames=1)
    for a, b in zip(spm.parameters(), fpm.parameters()):
        assert np.array_equal(a.data, b.data)
    x = np.random.default_rng(3).standard_normal((2, 1, 1, 8, 8, 8))
    with no_tape():
        hs = spm.encode(Tensor(x)).h.data
        hf = fpm.encode(Tensor(x[:, :, None])).h.data
    assert np.array_equal(hs, hf)


def test_swapping_frames_changes_embedding():
    rng = np.random.default_rng(4)
    fpm = FunctionalPatchModule(SMALL, 1, rng, frames=3)
    x = rng.standard_normal((1, 1, 3, 1, 8, 8, 8))
    swapped = x[:, :, [1, 0, 2]]
    with no_tape():
        a = fpm.encode(Tensor(x)).h.data
        b = fpm.encode(Tensor(swapped)).h.data
    assert not np.allclose(a, b)


def test_patches_have_independent_parameters():
    rng = np.random.default_rng(5)
    spm = StructuralPatchModule(SMALL, 3, rng)
    x = rand(rng, 3, 2, 1, 8, 8, 8)
    with no_tape():
        before = spm.decode(spm.encode(x)).data.copy()
        for p in spm.parameters():
            p.data[1] += 0.5
        after = spm.decode(spm.encode(x)).data
    assert np.array_equal(before[[0, 2]], after[[0, 2]])
    assert not np.allclose(before[1], after[1])


def test_shared_weights_use_one_parameter_set():
    cfg = EncoderConfig.for_patch(8, 2, channel_schedule=(4, 8, 8), bottleneck_channels=4, share_weights=True)
    rng = np.random.default_rng(6)
    spm = StructuralPatchModule(cfg, 5, rng)
    assert all(p.shape[0] == 1 for p in spm.parameters())
    x = rng.standard_normal((1, 1, 1, 8, 8, 8))
    with no_tape():
        h = spm.encode(Tensor(np.repeat(x, 5, axis=0))).h.data
    assert h.shape[0] == 5
    for k in range(1, 5):
        np.testing.assert_allclose(h[k], h[0], atol=1e-5)


def test_sparsity_penalty_examples():
    assert sparsity_penalty(Tensor([1, -2, 3]), 0.5).item() == 3.0
    assert sparsity_penalty(Tensor(np.zeros(4)), 0.5).item() == 0
    assert sparsity_penalty(Tensor([1, -2, 3]), 0.0).item() == 0
    with pytest.raises(ValueError):
        sparsity_penalty(Tensor([1.0]), -1)


def test_recon_loss_examples():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 3, 4))
    zero_h = Tensor(np.zeros(3))
    assert modality_recon_loss(Tensor(x), Tensor(x), zero_h, LossConfig()).item() == 0
    assert modality_recon_loss(Tensor(x + 1), Tensor(x), zero_h, LossConfig(lam=0)).item() == pytest.approx(24)
    g, o, h = rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), rng.standard_normal(4)
    ref = sum(((g[i] - o[i]) ** 2).sum() for i in range(3)) / 3 + 0.001 * np.abs(h).sum()
    got = modality_recon_loss(Tensor(g), Tensor(o), Tensor(h), LossConfig()).item()
    assert got == pytest.approx(ref, abs=1e-5)
    with pytest.raises(ShapeError):
        modality_recon_loss(Tensor(g), Tensor(o[:2]), Tensor(h), LossConfig())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1))
def test_recon_loss_is_non_negative(seed, lam):
    rng = np.random.default_rng(seed)
    loss = modality_recon_loss(rand(rng, 2, 3), rand(rng, 2, 3), rand(rng, 5), LossConfig(lam=lam))
    assert loss.item() >= 0


def test_recon_loss_gradients_on_8_cube_patches():
    rng = np.random.default_rng(8)
    for module in (StructuralPatchModule(SMALL, 2, rng), FunctionalPatchModule(SMALL, 2, rng, frames=2)):
        shape = (2, 2, 1, 8, 8, 8) if module.in_channels == 1 and not hasattr(module, "frames") \
            else (2, 2, 2, 1, 8, 8, 8)
        x = rand(rng, *shape)
        lc = LossConfig(lam=0.01)

        def loss():
            e = module.encode(x)
            return modality_recon_loss(module.decode(e), x, e.h, lc, 2)

        decoder = [p for p in module.parameters() if ".dec." in p.name]
        assert check_gradients(loss, decoder, rng, n_points=20, joint=True) < 1e-3
        assert check_gradients(loss, module.parameters(), rng, n_points=20, joint=True) < 1e-3


def test_overfits_a_single_repeated_patch():
    rng = np.random.default_rng(10)
    spm = StructuralPatchModule(SMALL, 1, rng)
    x = Tensor(np.repeat(rng.standard_normal((1, 1, 1, 8, 8, 8)), 2, axis=1))
    params = spm.parameters()
    state = AdamState()
    lc = LossConfig(lam=0.0)

    def mse():
        with no_tape():
            return float(np.mean((spm.decode(spm.encode(x)).data - x.data) ** 2))

    initial = mse()
    for _ in range(150):
        with Tape() as tape:
            e = spm.encode(x)
            loss = modality_recon_loss(spm.decode(e), x, e.h, lc, 2)
        backward(loss, tape, params)
        adam_step(params, None, state, lr=1e-2)
    assert mse() < 0.01 * initial
