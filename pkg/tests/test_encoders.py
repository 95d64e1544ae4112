import numpy as np
import pytest

from pcas.alignment import cmc_loss, label_consistency
from pcas.autograd import Tensor, bce_with_logits
from pcas.autograd.tensor import ShapeError
from pcas.encoders import EncoderConfig, PCASEncoders, audio_patchify, insert_prompt, patchify

CFG = EncoderConfig(num_layers=2)


def model(seed=0, tvp=True, cfg=CFG):
    return PCASEncoders(cfg, np.random.default_rng(seed), tvp=tvp)


def batch(seed=0, b=2, t=3, cfg=CFG):
    rng = np.random.default_rng(seed)
    frames = rng.random((b, t, 3, cfg.image_size, cfg.image_size))
    fbank = rng.normal(-12, 8, size=(b, t * cfg.fbank_frames_per_video_frame, cfg.fbank_bins))
    return frames, fbank


@pytest.mark.parametrize("size,p,n", [(32, 8, 16), (16, 16, 1), (32, 4, 64)])
def test_patchify_counts(size, p, n):
    assert patchify(np.zeros((3, size, size)), p).shape == (n, 3 * p * p)


def test_patchify_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((3, 24, 24)), 7)


def test_patchify_matches_loop():
    img = np.random.default_rng(1).random((3, 16, 16))
    out = patchify(img, 4)
    k = 0
    for r in range(4):
        for c in range(4):
            np.testing.assert_array_equal(out[k], img[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4].ravel())
            k += 1


def test_audio_patchify_matches_loop():
    blk = np.random.default_rng(2).random((16, 64))
    out = audio_patchify(blk, (4, 16))
    assert out.shape == (16, 64)
    np.testing.assert_array_equal(out[5], blk[4:8, 16:32].ravel())


@pytest.mark.parametrize("kw", [dict(image_size=30), dict(embed_dim=66), dict(audio_patch=(5, 16)),
                                dict(fbank_bins=60)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        EncoderConfig(**kw)


def test_config_round_trip():
    assert EncoderConfig.from_dict(CFG.to_dict()) == CFG


def test_output_shapes():
    m = model()
    frames, fbank = batch()
    out = m(frames, fbank)
    assert out.v_cls.shape == out.v_sem.shape == out.a_sem.shape == (2, 3, 64)
    assert out.v_pth.shape == (2, 3, CFG.num_patches, 64)
    assert out.audio_logits.shape == out.video_logits.shape == (2, 3, CFG.num_classes)


def test_vsem_is_patch_mean():
    out = model()(*batch())
    np.testing.assert_array_equal(out.v_sem.data, out.v_pth.data.mean(axis=2))


def test_video_logits_from_cls():
    m = model()
    out = m(*batch())
    np.testing.assert_allclose(out.video_logits.data, m.classify_video(out.v_cls).data, atol=0)


def test_identical_frames_identical_outputs():
    m = model()
    frames, _ = batch(b=1, t=1)
    two = np.concatenate([frames[0], frames[0]])
    v_cls, v_sem, v_pth = m.forward_visual(two)
    np.testing.assert_array_equal(v_cls.data[0], v_cls.data[1])
    np.testing.assert_array_equal(v_pth.data[0], v_pth.data[1])


@pytest.mark.parametrize("seed", range(3))
def test_patch_permutation_leaves_vsem(seed):
    m = model(seed)
    m.visual.pos_row.data[:] = 0
    m.visual.pos_col.data[:] = 0
    img = np.random.default_rng(seed).random((3, 32, 32))
    swapped = img.copy()
    swapped[:, 0:8, 0:8], swapped[:, 16:24, 8:16] = img[:, 16:24, 8:16], img[:, 0:8, 0:8]
    a = m.forward_visual(img[None])
    b = m.forward_visual(swapped[None])
    np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-12)
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-12)


def test_zero_weights_collapse():
    m = model()
    for p in m.parameters():
        p.data[:] = 0
    v_cls, v_sem, _ = m.forward_visual(batch()[0][0])
    np.testing.assert_array_equal(v_cls.data, v_sem.data)


def test_insert_prompt_position_zero():
    rng = np.random.default_rng(0)
    tokens = Tensor(rng.random((5, 16, 64)))
    prompt = Tensor(rng.random((5, 1, 64)))
    seq = insert_prompt(tokens, prompt)
    assert seq.shape == (5, 17, 64)
    np.testing.assert_array_equal(seq.data[:, 0], prompt.data[:, 0])
    np.testing.assert_array_equal(seq.data[:, 1:], tokens.data)


def test_insert_prompt_rejects_dim():
    with pytest.raises(ShapeError):
        insert_prompt(Tensor(np.zeros((1, 16, 64))), Tensor(np.zeros((1, 1, 32))))


def test_pool_excludes_prompt():
    a = model().audio
    assert list(a.pool_indices(True)) == list(range(1, CFG.num_audio_patches + 1))
    assert list(a.pool_indices(False)) == list(range(CFG.num_audio_patches))


def test_silence_without_prompt_is_frame_constant():
    m = model(tvp=False)
    frames, _ = batch(b=1, t=4)
    silence = np.full((1, 4 * 16, 64), np.log(1e-10))
    a = m(frames, silence).a_sem.data[0]
    for t in range(1, 4):
        np.testing.assert_array_equal(a[t], a[0])


def test_prompt_changes_audio_token():
    m = model()
    fb = np.random.default_rng(3).normal(size=(1, 16, 64))
    p1 = Tensor(np.random.default_rng(4).normal(size=(1, 64)))
    p2 = Tensor(np.random.default_rng(5).normal(size=(1, 64)))
    assert not np.array_equal(m.audio(fb, p1).data, m.audio(fb, p2).data)


def test_audio_frames_independent():
    m = model()
    frames, fbank = batch(b=1, t=3)
    base = m(frames, fbank).a_sem.data
    fb2 = fbank.copy()
    fb2[:, 16:] += np.random.default_rng(9).normal(size=fb2[:, 16:].shape)
    fr2 = frames.copy()
    fr2[:, 1:] = np.random.default_rng(10).random(fr2[:, 1:].shape)
    out = m(fr2, fb2).a_sem.data
    np.testing.assert_array_equal(out[:, 0], base[:, 0])
    assert not np.allclose(out[:, 1:], base[:, 1:])


def test_fbank_shape_mismatch():
    frames, fbank = batch()
    with pytest.raises(ShapeError):
        model()(frames, fbank[:, :-1])


def test_cmc_gradient_reaches_bridge():
    m = model()
    frames, fbank = batch(b=2, t=2)
    out = m(frames, fbank)
    n = 4
    loss = cmc_loss(out.a_sem.reshape(n, 64), out.v_sem.reshape(n, 64), out.v_cls.reshape(n, 64),
                    label_consistency([(1,), (1,), (2,), (2,)]), 0.07)
    loss.backward()
    assert np.abs(m.bridge.weight.grad).sum() > 0
    assert np.abs(m.audio.prompt_pos.grad).sum() > 0


def test_no_tvp_leaves_bridge_untouched():
    m = model(tvp=False)
    frames, fbank = batch(b=2, t=2)
    out = m(frames, fbank)
    (out.audio_logits.sum() + out.video_logits.sum()).backward()
    g = m.bridge.weight.grad
    assert g is None or not np.any(g)


def test_zero_logits_half_probability_and_saturation():
    y = np.array([[1.0, 0.0, 1.0]])
    assert bce_with_logits(Tensor(np.zeros((1, 3))), y).item() == pytest.approx(np.log(2))
    assert bce_with_logits(Tensor((2 * y - 1) * 50.0), y).item() < 1e-20
