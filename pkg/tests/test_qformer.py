import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abnblip import tensor as T
from abnblip.gradcheck import grad_check
from abnblip.qformer import (
    FULL_SCALE_QFORMER,
    Attention,
    MaskError,
    QFormer,
    QFormerConfig,
    additive_mask,
    build_attention_mask,
)

V = 95


def model(seed=0, **kw):
    return QFormer(QFormerConfig(**kw), np.random.default_rng(seed))


def rand_inputs(seed, B=2, n_tok=7, L=6):
    r = np.random.default_rng(seed)
    return r.normal(size=(B, n_tok, 32)), r.integers(4, V, size=(B, L))


# ------------------------------------------------------------------ masks


def test_text_causal_lower_triangular():
    m = build_attention_mask("text-causal", 3)
    assert np.array_equal(m.allowed, np.tril(np.ones((3, 3), dtype=bool)))


def test_unimodal_query_all_true():
    m = build_attention_mask("unimodal-query")
    assert m.allowed.shape == (32, 32) and m.allowed.all()


def test_multimodal_causal_blocks():
    a = build_attention_mask("multimodal-causal", 2).allowed
    assert a.shape == (34, 34)
    assert a[:32, :32].all() and not a[:32, 32:].any()
    assert a[32:, :32].all()
    assert np.array_equal(a[32:, 32:], [[True, False], [True, True]])


def test_unknown_regime_and_empty_row():
    with pytest.raises(MaskError):
        build_attention_mask("sideways")
    allowed = np.ones((3, 3), dtype=bool)
    allowed[1] = False
    with pytest.raises(MaskError):
        additive_mask(allowed)


def test_single_token_attends_to_itself():
    att = Attention(np.random.default_rng(0), 8, 2)
    trace = []
    att(T.Tensor(np.random.default_rng(1).normal(size=(1, 1, 8))), T.Tensor(np.random.default_rng(1).normal(size=(1, 1, 8))), trace=trace)
    assert np.all(trace[0] == 1.0)


# ------------------------------------------------------------------ query branch


def test_query_output_shapes_and_unit_norm():
    qf = model()
    v, _ = rand_inputs(0)
    q = qf.query_visual(v)
    assert q.Z.shape == (2, 32, 32) and q.Z_proj.shape == (2, 32, 16)
    assert np.max(np.abs(np.linalg.norm(q.Z_proj.data, axis=-1) - 1)) < 1e-9


def test_full_scale_projection_width():
    assert FULL_SCALE_QFORMER["d_p"] == 256 and FULL_SCALE_QFORMER["d"] == 768


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_permutation_invariance(seed):
    qf = model(seed % 7)
    v, _ = rand_inputs(seed, B=1, n_tok=11)
    perm = np.random.default_rng(seed).permutation(11)
    a = qf.query_visual(v).Z.data
    b = qf.query_visual(v[:, perm]).Z.data
    assert np.max(np.abs(a - b)) < 1e-9


def test_identical_visual_rows_any_attention():
    qf = model()
    row = np.random.default_rng(0).normal(size=(1, 1, 32))
    a = qf.query_visual(np.repeat(row, 3, axis=1)).Z.data
    b = qf.query_visual(np.repeat(row, 17, axis=1)).Z.data
    assert np.max(np.abs(a - b)) < 1e-12


def test_zero_value_weights_reduce_to_query_only():
    qf = model()
    for layer in qf.layers:
        for p in (layer.ca.v.weight, layer.ca.v.bias, layer.ca.o.bias):
            p.data[...] = 0
    z = T.Tensor(qf.queries.data[None])
    for layer in qf.layers:
        z = layer.ln_sa(T.add(z, layer.sa(z, z)))
        z = layer.ffn(layer.ln_ca(z))
    out = qf.query_visual(np.zeros((1, 5, 32))).Z.data
    np.testing.assert_allclose(out, z.data, rtol=0, atol=1e-12)


def test_query_gradient_fd():
    qf = model()
    v, _ = rand_inputs(1, B=1)
    w = np.random.default_rng(2).normal(size=(1, 32, 16))
    f = lambda: T.sum_(T.mul(qf.query_visual(v).Z_proj, w))
    rep = grad_check(f, {"queries": qf.queries}, samples=20, tol=1e-4)
    assert rep[0].passed


def test_rows_of_queries_untied():
    qf = model()
    v, _ = rand_inputs(3, B=1)
    for p in qf.parameters():
        p.zero_grad()
    q = qf.query_visual(v)
    T.backward(T.sum_(q.Z_proj[:, 0, :]))
    g = qf.queries.grad
    assert g.shape == (32, 32) and np.any(g != 0)
    assert len({qf.queries.data[i].tobytes() for i in range(32)}) == 32


# ------------------------------------------------------------------ text branch


def test_encode_text_deterministic_unit_norm():
    qf = model()
    _, ids = rand_inputs(0)
    ids[:, 0] = 1
    a = qf.encode_text(ids).h.data
    b = qf.encode_text(ids).h.data
    assert a.tobytes() == b.tobytes()
    assert np.max(np.abs(np.linalg.norm(a, axis=-1) - 1)) < 1e-9


def test_unknown_token_and_overlong_text():
    qf = model()
    with pytest.raises(IndexError):
        qf.encode_text(np.array([[1, V + 3]]))
    with pytest.raises(ValueError):
        qf.encode_text(np.ones((1, 13), dtype=int))


def test_decode_equals_dense_joint_pass():
    qf = model()
    v, ids = rand_inputs(4, B=3, L=9)
    q = qf.query_visual(v)
    _, t = qf.joint_forward(ids, v)
    np.testing.assert_allclose(qf.decode(ids, q).data, qf.lm_head(t).data, rtol=0, atol=1e-12)


def test_text_causal_position_zero_isolated():
    qf = model()
    v, ids = rand_inputs(5, B=1, L=6)
    q = qf.query_visual(v)
    base = qf.decode(ids, q).data
    ids2 = ids.copy()
    ids2[0, 1:] = np.random.default_rng(9).integers(4, V, size=5)
    assert np.max(np.abs(qf.decode(ids2, q).data[:, 0] - base[:, 0])) < 1e-12


def test_unimodal_query_independent_of_text_parameters():
    qf = model()
    v, _ = rand_inputs(6)
    before = qf.query_visual(v).Z.data.copy()
    for p in (qf.tok_emb, qf.pos_emb, qf.text_proj.weight, qf.lm_head.weight):
        p.data += 1.0
    assert qf.query_visual(v).Z.data.tobytes() == before.tobytes()


def test_shared_backbone_perturbation():
    qf = model()
    v, ids = rand_inputs(7)
    ids[:, 0] = 1
    z0 = qf.query_visual(v).Z.data.copy()
    h0 = qf.encode_text(ids).h.data.copy()
    qf.layers[0].sa.q.weight.data += np.random.default_rng(1).normal(0, 0.1, (32, 32))
    assert np.max(np.abs(qf.query_visual(v).Z.data - z0)) > 1e-6
    assert np.max(np.abs(qf.encode_text(ids).h.data - h0)) > 1e-6


def test_attention_rows_sum_to_one_every_regime():
    qf = model()
    v, ids = rand_inputs(8)
    ids[:, 0] = 1
    trace = qf.start_trace()
    q = qf.query_visual(v)
    qf.encode_text(ids)
    qf.decode(ids, q)
    qf.decode(ids, q, k_index=np.array([3, 9]), scope="single")
    qf.joint_forward(ids, v)
    qf.stop_trace()
    assert len(trace) > 0
    for p in trace:
        assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-9


def test_single_scope_sees_one_query_row():
    qf = model()
    v, ids = rand_inputs(9, B=1, L=5)
    q = qf.query_visual(v)
    base = qf.decode(ids, q, k_index=np.array([4]), scope="single").data
    # perturb every query row except 4 in each layer's input states
    for s in q.layer_inputs:
        s.data[:, np.arange(32) != 4] += 1.0
    again = qf.decode(ids, q, k_index=np.array([4]), scope="single").data
    assert np.max(np.abs(again - base)) < 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        QFormerConfig(d=30, heads=4)
    with pytest.raises(ValueError):
        QFormerConfig(n_queries=16)
