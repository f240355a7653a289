import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitalwatch.autodiff import Tensor
from vitalwatch.series import CONTEXT, TARGET
from vitalwatch.tokenizer import (
    FUTURE,
    PAST,
    PROMPT,
    TokenizerConfig,
    TokenizerError,
    assemble,
    embed_patches,
    mask_future,
    mask_missing,
    tokenize,
)


def weights(k, d, p=1, types=4, channels=None, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    w = {
        "embed.target.w": Tensor(scale * rng.normal(size=(k, d))),
        "embed.target.b": Tensor(scale * rng.normal(size=d)),
        "embed.context.w": Tensor(scale * rng.normal(size=(k, d))),
        "embed.context.b": Tensor(scale * rng.normal(size=d)),
        "embed.gen": Tensor(rng.normal(size=d)),
        "embed.prompts": Tensor(rng.normal(size=(types, p, d))),
    }
    if channels:
        w["embed.channel_id"] = Tensor(rng.normal(size=(channels, d)))
    return w


ROLES = (TARGET, TARGET, CONTEXT, CONTEXT, CONTEXT)
CFG = TokenizerConfig(patch_size=2, embed_dim=4, prompt_count=1, future_len=8)


def test_shapes_worked_example():
    rng = np.random.default_rng(1)
    zp, zf, zc = embed_patches(rng.normal(size=(16, 5)), np.zeros((16, 5), bool), ROLES, CFG, weights(2, 4))
    assert zp.shape == (4, 2, 4)
    assert zf.shape == (4, 2, 4)
    assert zc.shape == (8, 3, 4)
    Z = assemble(zp, mask_future(zf, Tensor(np.ones(4))), zc, weights(2, 4)["embed.prompts"], CFG)
    assert Z.shape == (9, 5, 4)


def test_window_must_leave_a_future():
    with pytest.raises(TokenizerError):
        TokenizerConfig(patch_size=16, embed_dim=4, future_len=0)
    cfg = TokenizerConfig(patch_size=3, embed_dim=4, future_len=8)
    with pytest.raises(TokenizerError, match="k=3"):
        cfg.check_window(16)
    with pytest.raises(TokenizerError):
        TokenizerConfig(patch_size=2, embed_dim=4, future_len=18).check_window(16)


def test_zero_input_zero_weights_give_zero_tokens():
    w = weights(2, 4, scale=0.0)
    for z in embed_patches(np.zeros((16, 5)), np.zeros((16, 5), bool), ROLES, CFG, w):
        assert not z.data.data.any()


def test_patch_values_reach_embedding():
    # identity-like weights: token = patch samples (d = k)
    cfg = TokenizerConfig(patch_size=2, embed_dim=2, future_len=2)
    w = weights(2, 2, scale=0.0)
    w["embed.target.w"] = Tensor(np.eye(2))
    x = np.arange(8.0).reshape(4, 2)
    zp, zf, _ = embed_patches(x[:, :1], np.zeros((4, 1), bool), (TARGET,), cfg, w)
    assert zp.data.data[:, 0].tolist() == [[0.0, 2.0]]
    assert zf.data.data[:, 0].tolist() == [[4.0, 6.0]]
    assert zf.time_ranges == ((2, 4),)


def test_mask_future_replaces_every_future_token():
    rng = np.random.default_rng(2)
    _, zf, _ = embed_patches(rng.normal(size=(16, 5)), np.zeros((16, 5), bool), ROLES, CFG, weights(2, 4))
    g = Tensor(rng.normal(size=4))
    out = mask_future(zf, g)
    assert np.allclose(out.data.data.reshape(-1, 4), g.data)
    assert out.time_kinds == zf.time_kinds


def test_fully_missing_patch_becomes_gen_partial_does_not():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(16, 5))
    miss = np.zeros((16, 5), bool)
    miss[2:4, 0] = True  # whole second past patch of channel 0
    miss[4, 1] = True  # half of third past patch of channel 1
    w = weights(2, 4)
    zp, _, _ = embed_patches(x, miss, ROLES, CFG, w)
    g = w["embed.gen"]
    out = mask_missing(zp, g)
    assert np.allclose(out.data.data[1, 0], g.data)
    assert not np.allclose(out.data.data[2, 1], g.data)
    # the missing sample is zero-imputed before embedding
    expected = np.array([0.0, x[5, 1]]) @ w["embed.target.w"].data + w["embed.target.b"].data
    assert np.allclose(zp.data.data[2, 1], expected)


def test_context_future_masking_is_optional():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(16, 5))
    w = weights(2, 4)
    off = tokenize(x, np.zeros((16, 5), bool), ROLES, CFG, w)
    on_cfg = TokenizerConfig(2, 4, 1, 8, mask_context_future=True)
    on = tokenize(x, np.zeros((16, 5), bool), ROLES, on_cfg, w)
    assert np.allclose(off.data.data[:5], on.data.data[:5])
    assert not np.allclose(off.data.data[5:, 2:], on.data.data[5:, 2:])
    assert np.allclose(off.data.data[5:, :2], on.data.data[5:, :2])


def test_assemble_layout_and_metadata():
    rng = np.random.default_rng(5)
    w = weights(2, 4, p=2)
    cfg = TokenizerConfig(2, 4, prompt_count=2, future_len=8, anomaly_type_id=3)
    zp, zf, zc = embed_patches(rng.normal(size=(16, 5)), np.zeros((16, 5), bool), ROLES, cfg, w)
    Z = assemble(zp, zf, zc, w["embed.prompts"], cfg)
    assert Z.time_kinds == (PROMPT,) * 2 + (PAST,) * 4 + (FUTURE,) * 4
    assert Z.channel_kinds == (TARGET,) * 2 + (CONTEXT,) * 3
    assert Z.time_ranges[:2] == (None, None)
    assert Z.time_ranges[2] == (0, 2) and Z.time_ranges[-1] == (14, 16)
    for c in range(5):
        assert np.allclose(Z.data.data[:2, c], w["embed.prompts"].data[3])


def test_prompt_bank_validation():
    rng = np.random.default_rng(6)
    w = weights(2, 4, p=1)
    zp, zf, zc = embed_patches(rng.normal(size=(16, 5)), np.zeros((16, 5), bool), ROLES, CFG, w)
    with pytest.raises(TokenizerError):
        TokenizerConfig(2, 4, prompt_count=0)
    with pytest.raises(TokenizerError, match="anomaly type"):
        assemble(zp, zf, zc, w["embed.prompts"], TokenizerConfig(2, 4, 1, 8, anomaly_type_id=9))
    with pytest.raises(TokenizerError, match="embedding axis"):
        assemble(zp, zf, zc, Tensor(np.zeros((4, 1, 5))), CFG)


def test_channel_mismatch_rejected():
    rng = np.random.default_rng(7)
    w = weights(2, 4)
    zp, zf, zc = embed_patches(rng.normal(size=(16, 5)), np.zeros((16, 5), bool), ROLES, CFG, w)
    zp2, _, _ = embed_patches(rng.normal(size=(16, 3)), np.zeros((16, 3), bool), (TARGET,) * 3, CFG, w)
    with pytest.raises(TokenizerError, match="channel axis"):
        assemble(zp2, zf, zc, w["embed.prompts"], CFG)


def test_mask_future_idempotent():
    rng = np.random.default_rng(8)
    miss = rng.random((16, 5)) < 0.4
    w = weights(2, 4)
    _, zf, _ = embed_patches(rng.normal(size=(16, 5)), miss, ROLES, CFG, w)
    once = mask_future(zf, w["embed.gen"])
    twice = mask_future(once, w["embed.gen"])
    assert np.array_equal(once.data.data, twice.data.data)


def test_assemble_distinguishes_inputs():
    rng = np.random.default_rng(9)
    w = weights(2, 4, channels=5)
    x = rng.normal(size=(16, 5))
    base = tokenize(x, np.zeros((16, 5), bool), ROLES, CFG, w).data.data
    for r, c in [(0, 0), (7, 1), (3, 2), (15, 4)]:
        y = x.copy()
        y[r, c] += 1.0
        other = tokenize(y, np.zeros((16, 5), bool), ROLES, CFG, w).data.data
        if r >= 8 and c < 2:
            continue  # future target samples are hidden behind GEN by design
        assert not np.array_equal(base, other)


def test_future_targets_never_leak():
    rng = np.random.default_rng(10)
    w = weights(2, 4, channels=5)
    x = rng.normal(size=(16, 5))
    y = x.copy()
    y[8:, :2] = rng.normal(size=(8, 2)) * 100
    a = tokenize(x, np.zeros((16, 5), bool), ROLES, CFG, w).data.data
    b = tokenize(y, np.zeros((16, 5), bool), ROLES, CFG, w).data.data
    assert np.array_equal(a, b)


def test_batch_axes_carry_through():
    rng = np.random.default_rng(11)
    w = weights(2, 4, channels=5)
    xs = rng.normal(size=(3, 16, 5))
    ms = np.zeros((3, 16, 5), bool)
    batched = tokenize(xs, ms, ROLES, CFG, w).data.data
    assert batched.shape == (3, 9, 5, 4)
    single = tokenize(xs[1], ms[1], ROLES, CFG, w).data.data
    assert np.allclose(batched[1], single)


@settings(max_examples=40, deadline=None)
@given(
    k=st.integers(1, 4),
    past_patches=st.integers(0, 4),
    future_patches=st.integers(1, 4),
    n=st.integers(1, 3),
    m=st.integers(0, 3),
    p=st.integers(1, 3),
    d=st.integers(1, 6),
)
def test_shape_law(k, past_patches, future_patches, n, m, p, d):
    K = k * (past_patches + future_patches)
    cfg = TokenizerConfig(k, d, prompt_count=p, future_len=k * future_patches)
    roles = (TARGET,) * n + (CONTEXT,) * m
    w = weights(k, d, p=p, channels=n + m)
    Z = tokenize(np.ones((K, n + m)), np.zeros((K, n + m), bool), roles, cfg, w)
    assert Z.shape == (p + K // k, n + m, d)
    assert len(Z.time_kinds) == p + K // k
