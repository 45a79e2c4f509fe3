import numpy as np
import pytest

from amam.aa import (
    AABlockParams,
    FusionMode,
    HeadProjections,
    aa_forward,
    aa_heads,
    attention_map,
    cascade_fuse,
    default_qk_dim,
    head_attention,
)
from amam.tensor import ShapeError, Tensor, gradcheck, mul, sum_all


def head(d, d_qk, rng, wq=None, wv=None):
    return HeadProjections(
        w_q=Tensor(rng.standard_normal((d, d_qk)) if wq is None else wq),
        w_k=Tensor(rng.standard_normal((d, d_qk))),
        w_v=Tensor(rng.standard_normal((d, d)) if wv is None else wv),
    )


def test_zero_query_gives_mean_of_values(rng):
    d = 3
    hp = head(d, 2, rng, wq=np.zeros((d, 2)))
    x = rng.standard_normal((2, d, 4, 5))
    out = head_attention(Tensor(x), hp).data
    for n in range(2):
        tokens = x[n].reshape(d, -1).T
        v_mean = (tokens @ hp.w_v.data).mean(axis=0)
        np.testing.assert_allclose(out[n], np.broadcast_to(v_mean[:, None, None], (d, 4, 5)), atol=1e-12)


def test_single_token_returns_value_projection(rng):
    hp = head(4, 2, rng)
    x = rng.standard_normal((1, 4, 1, 1))
    out = head_attention(Tensor(x), hp).data
    np.testing.assert_array_equal(out.reshape(4), x.reshape(4) @ hp.w_v.data)


def test_head_shape(rng, randt):
    assert head_attention(randt(1, 16, 8, 8), head(16, 8, rng)).shape == (1, 16, 8, 8)


def test_head_channel_mismatch(rng, randt):
    with pytest.raises(ShapeError, match="d=4"):
        head_attention(randt(1, 3, 2, 2), head(4, 2, rng))


def test_attention_rows_are_distributions(rng, randt):
    a = attention_map(randt(2, 4, 3, 5) * 10.0, head(4, 2, rng))
    assert a.shape == (2, 15, 15)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-9)


def test_adaptive_zero_logit_equals_average(randt):
    a, b = randt(1, 3, 4, 4), randt(1, 3, 4, 4)
    x = cascade_fuse(a, b, FusionMode.ADAPTIVE, logit=Tensor(0.0))
    y = cascade_fuse(a, b, FusionMode.AVERAGE)
    np.testing.assert_allclose(x.data, y.data, atol=1e-12, rtol=0)


def test_adaptive_saturates_to_previous(randt):
    a, b = randt(1, 3, 4, 4), randt(1, 3, 4, 4)
    out = cascade_fuse(a, b, FusionMode.ADAPTIVE, logit=Tensor(50.0))
    np.testing.assert_allclose(out.data, a.data, atol=1e-9, rtol=0)


def test_add_fusion(randt):
    a, b = randt(1, 3, 4, 4), randt(1, 3, 4, 4)
    np.testing.assert_array_equal(cascade_fuse(a, b, "add").data, a.data + b.data)


def test_concat_fusion_projects_back(rng, randt):
    a, b = randt(1, 3, 4, 4), randt(1, 3, 4, 4)
    m = rng.standard_normal((6, 3))
    out = cascade_fuse(a, b, "concat", concat_fuse=Tensor(m)).data
    stacked = np.concatenate([a.data, b.data], axis=1)
    np.testing.assert_allclose(out, np.einsum("nchw,cd->ndhw", stacked, m), atol=1e-12)


def test_cascade_fuse_errors(randt):
    with pytest.raises(ShapeError):
        cascade_fuse(randt(1, 3, 4, 4), randt(1, 3, 4, 2), "add")
    with pytest.raises(ValueError, match="concat"):
        cascade_fuse(randt(1, 3, 4, 4), randt(1, 3, 4, 4), "concat")


def test_params_require_concat_matrices(rng):
    p = AABlockParams.create(8, 4, rng=rng)
    with pytest.raises(ShapeError, match="concat"):
        AABlockParams(h=4, heads=p.heads, w_p=p.w_p, alpha_logits=p.alpha_logits, fusion_mode="concat")


def test_single_head_is_projected_attention(rng, randt):
    p = AABlockParams.create(8, 1, rng=rng)
    assert p.alpha_logits.shape == (0,)
    x = randt(1, 8, 3, 3)
    expected = np.einsum("nchw,cd->ndhw", head_attention(x, p.heads[0]).data, p.w_p.data)
    np.testing.assert_allclose(aa_forward(x, p).data, expected, atol=1e-12)


def test_aa_shape(rng, randt):
    assert aa_forward(randt(1, 64, 16, 16), AABlockParams.create(64, 4, rng=rng)).shape == (1, 64, 16, 16)


def test_indivisible_heads(rng):
    with pytest.raises(ShapeError, match="divide"):
        AABlockParams.create(10, 4, rng=rng)


def test_default_qk_dim():
    assert [default_qk_dim(d) for d in (1, 2, 3, 16)] == [1, 1, 1, 8]


def test_uniform_attention_add_cascade_oracle(rng):
    c, h = 8, 4
    d = c // h
    p = AABlockParams.create(c, h, rng=rng, fusion_mode="add")
    for hp in p.heads:
        hp.w_q.data[...] = 0.0
        hp.w_v.data = np.eye(d)
    p.w_p.data = np.eye(c)
    x = rng.standard_normal((2, c, 3, 4))
    out = aa_forward(Tensor(x), p).data

    # direct per-position averaging: head i sees the running sum of split means
    expected = np.empty_like(x)
    carry = np.zeros((2, d, 1, 1))
    for i in range(h):
        split = x[:, i * d:(i + 1) * d]
        cascaded = split + (carry if i else 0.0)
        mean = cascaded.reshape(2, d, -1).mean(axis=2)[:, :, None, None]
        expected[:, i * d:(i + 1) * d] = np.broadcast_to(mean, (2, d, 3, 4))
        carry = mean
    np.testing.assert_allclose(out, expected, atol=1e-12)


@pytest.mark.parametrize("mode", list(FusionMode))
def test_cascade_locality(rng, mode):
    p = AABlockParams.create(8, 4, rng=rng, fusion_mode=mode)
    x = rng.standard_normal((1, 8, 3, 3))
    base = aa_heads(Tensor(x), p)
    for j in range(1, 4):
        y = x.copy()
        y[:, 2 * j:2 * j + 2] += 1.0
        pert = aa_heads(Tensor(y), p)
        for i in range(j):
            assert base[i].data.tobytes() == pert[i].data.tobytes()


def test_alpha_beta_sum_exactly_one(rng):
    p = AABlockParams.create(4, 4, rng=rng)
    for logits in rng.uniform(-30, 30, (200, 3)):
        p.alpha_logits.data = logits
        a, b = p.alphas(), p.betas()
        assert np.all(a + b == 1.0)
        assert np.all((a > 0) & (a < 1))


@pytest.mark.parametrize("mode", list(FusionMode))
def test_aa_gradcheck(rng, mode):
    p = AABlockParams.create(6, 3, rng=rng, fusion_mode=mode)
    p.alpha_logits.data = rng.standard_normal(2)
    weights = rng.standard_normal((2, 6, 2, 3))

    def f(x, *_):
        return sum_all(mul(aa_forward(x, p), weights))

    assert gradcheck(f, [Tensor(rng.standard_normal((2, 6, 2, 3)))] + list(p.parameters().values())) < 1e-4


def test_alpha_logits_receive_gradient(rng, randt):
    p = AABlockParams.create(8, 4, rng=rng)
    sum_all(mul(aa_forward(randt(1, 8, 3, 3), p), rng.standard_normal((1, 8, 3, 3)))).backward()
    assert p.alpha_logits.grad is not None and np.all(p.alpha_logits.grad != 0)
