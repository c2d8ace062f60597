import numpy as np
import pytest

from gazemoe import tensor as T
from gazemoe.config import load_config
from gazemoe.errors import ContractError, DimensionError
from gazemoe.gradcheck import finite_diff_check, relative_errors
from gazemoe.losses import angular_loss, total_loss
from gazemoe.model import build_model
from gazemoe.data import make_dataset
from gazemoe.nn import FeedForward
from gazemoe.tensor import Tensor, default_dtype
from gazemoe.transformer import (
    DenseFFN,
    MoEFFN,
    SelfAttention,
    TokenFusion,
    TokenSequence,
    TransformerEncoder,
    attention_block,
    forward_encoder,
    load_balance_loss,
    moe_ffn,
    route_logits,
)

D = 8


def f64(fn):
    with default_dtype(np.float64):
        return fn()


def rng(seed=0):
    return np.random.default_rng(seed)


# -- fusion ---------------------------------------------------------------------------


def desk_fusion(**kw):
    return TokenFusion(64, 32, 16, 16, rng(), **kw)


def test_fused_length_is_2_plus_n_plus_m():
    fusion = desk_fusion()
    r = rng(1)
    seq = fusion(Tensor(r.normal(size=(2, 64))), Tensor(r.normal(size=(2, 64))),
                 Tensor(r.normal(size=(2, 16, 64))), Tensor(r.normal(size=(2, 16, 32))))
    assert seq.tokens.shape == (2, 34, 16)
    assert len(seq) == 34
    assert seq.type_tags == ("F1", "F2") + ("PATCH",) * 16 + ("CNN",) * 16


def test_zero_inputs_give_type_embedding_plus_bias():
    fusion = desk_fusion()
    seq = fusion(Tensor(np.zeros((1, 64))), Tensor(np.zeros((1, 64))), Tensor(np.zeros((1, 16, 64))),
                 Tensor(np.zeros((1, 16, 32))))
    tok = seq.tokens.data[0]
    np.testing.assert_allclose(tok[0], fusion.type_embed.data[0] + fusion.proj_f1.bias.data, atol=1e-7)
    np.testing.assert_allclose(tok[1], fusion.type_embed.data[1] + fusion.proj_f2.bias.data, atol=1e-7)
    np.testing.assert_allclose(tok[2:18], np.tile(fusion.type_embed.data[2] + fusion.proj_patch.bias.data, (16, 1)),
                               atol=1e-7)
    np.testing.assert_allclose(tok[18:], np.tile(fusion.type_embed.data[3] + fusion.proj_cnn.bias.data, (16, 1)),
                               atol=1e-7)


def test_permuting_cnn_rows_permutes_tokens():
    fusion = desk_fusion()
    r = rng(2)
    f, p, c = r.normal(size=(1, 64)), r.normal(size=(1, 16, 64)), r.normal(size=(1, 16, 32))
    perm = r.permutation(16)
    a = fusion(Tensor(f), Tensor(f), Tensor(p), Tensor(c)).tokens.data[0]
    b = fusion(Tensor(f), Tensor(f), Tensor(p), Tensor(c[:, perm])).tokens.data[0]
    np.testing.assert_allclose(b[18:], a[18:][perm], atol=1e-6)
    np.testing.assert_array_equal(b[:18], a[:18])


def test_cnn_positional_breaks_permutation_symmetry():
    fusion = desk_fusion(cnn_positional=True)
    c = rng(3).normal(size=(1, 16, 32))
    a = fusion(None, None, None, Tensor(c)).tokens.data[0]
    b = fusion(None, None, None, Tensor(c[:, ::-1])).tokens.data[0]
    assert not np.allclose(b, a[::-1])


def test_excluded_families_are_dropped():
    seq = desk_fusion()(Tensor(np.ones((3, 64))), None, None, None)
    assert seq.tokens.shape == (3, 1, 16) and seq.type_tags == ("F1",)


def test_fusion_shape_mismatch():
    with pytest.raises(DimensionError):
        desk_fusion()(Tensor(np.ones((1, 63))), None, None, None)
    with pytest.raises(ContractError):
        desk_fusion()(None, None, None, None)


# -- attention ----------------------------------------------------------------------


def test_single_token_attention_is_value_projection():
    attn = f64(lambda: SelfAttention(D, 2, rng()))
    x = f64(lambda: Tensor(rng(1).normal(size=(1, 1, D))))
    out = f64(lambda: attn(x)).data
    expected = f64(lambda: x + attn.out(attn.v(attn.norm(x)))).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_shape_and_sequence_wrapper():
    attn = SelfAttention(16, 4, rng())
    seq = TokenSequence(Tensor(rng(1).normal(size=(2, 5, 16))), ("F1",) * 5)
    out = attention_block(seq, attn)
    assert out.tokens.shape == (2, 5, 16) and out.type_tags == seq.type_tags


def test_attention_rejects_indivisible_heads():
    with pytest.raises(DimensionError):
        SelfAttention(10, 4, rng())


def test_attention_gradcheck_3_tokens():
    with default_dtype(np.float64):
        attn = SelfAttention(D, 2, rng())
        x = Tensor(rng(1).normal(size=(1, 3, D)), requires_grad=True)
        w = Tensor(rng(2).normal(size=(1, 3, D)))
        params = dict(attn.named_parameters(), x=x)
        assert finite_diff_check(lambda: (attn(x) * w).sum(), params) < 1e-3


# -- routing ------------------------------------------------------------------------


def test_full_routing_gates_equal_probs():
    dec = route_logits(Tensor(rng().normal(size=(5, 4))), 4)
    assert all(sorted(row) == [0, 1, 2, 3] for row in dec.topk_indices.tolist())
    gates = np.zeros((5, 4))
    np.put_along_axis(gates, dec.topk_indices, dec.gate_weights.data, axis=1)
    np.testing.assert_allclose(gates, dec.probs.data, atol=1e-6)


def test_dominant_logit_top1():
    dec = route_logits(Tensor([10.0, 0.0, 0.0, 0.0]), 1)
    assert dec.topk_indices.tolist() == [[0]]
    assert dec.gate_weights.data[0, 0] == pytest.approx(1.0, abs=1e-6)
    # direct softmax evaluation
    assert dec.probs.data[0, 0] == pytest.approx(np.exp(10) / (np.exp(10) + 3), rel=1e-6)


def test_tied_logits_pick_lowest_indices():
    dec = route_logits(Tensor(np.zeros((3, 4))), 2)
    assert dec.topk_indices.tolist() == [[0, 1]] * 3


def test_router_decision_invariants():
    dec = route_logits(Tensor(rng(4).normal(size=(32, 8))), 3)
    np.testing.assert_allclose(dec.probs.data.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(dec.gate_weights.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(dec.gate_weights.data > 0)
    assert dec.batch_load.sum() == pytest.approx(1.0)


def test_route_rejects_bad_k():
    with pytest.raises(ContractError):
        route_logits(Tensor(np.zeros((2, 4))), 5)


# -- MoE feed-forward ---------------------------------------------------------------


def test_single_expert_moe_equals_dense_layer():
    with default_dtype(np.float64):
        moe = MoEFFN(D, 16, routed=1, top_k=1, shared=0, rng=rng())
        dense = DenseFFN(D, 16, rng(1))
        dense.ffn.load_state_dict(moe.experts[0].state_dict())
        dense.norm.load_state_dict(moe.norm.state_dict())
        x = Tensor(rng(2).normal(size=(2, 5, D)))
        np.testing.assert_allclose(moe(x)[0].data, dense(x)[0].data, atol=1e-12)


def test_uniform_router_equals_mean_of_experts():
    moe = MoEFFN(D, 16, routed=4, top_k=4, shared=0, rng=rng())
    moe.router.weight.data[...] = 0.0
    h = Tensor(rng(3).normal(size=(50, D)))
    out, dec = moe.mix(h)
    brute = np.mean([e(h).data for e in moe.experts], axis=0)  # dense evaluation of every expert
    np.testing.assert_allclose(out.data, brute, atol=1e-5)


def test_unrouted_experts_get_zero_gradient():
    moe = MoEFFN(D, 16, routed=4, top_k=1, shared=1, rng=rng())
    moe.router.weight.data[...] = 0.0
    moe.router.weight.data[:, 3] = 50.0  # any token with positive feature sum prefers expert 3
    x = np.abs(rng(4).normal(size=(1, D)))
    out, dec = moe.mix(Tensor(x))
    assert dec.topk_indices.tolist() == [[3]]
    out.sum().backward()
    for i, expert in enumerate(moe.experts):
        grads = [p.grad for _, p in expert.named_parameters()]
        if i == 3:
            assert all(g is not None and np.any(g != 0) for g in grads)
        else:
            assert all(g is None or not np.any(g) for g in grads)


def test_sparsity_at_most_k_active():
    moe = MoEFFN(16, 8, routed=8, top_k=3, shared=2, rng=rng())
    out, dec = moe(Tensor(rng(5).normal(size=(4, 9, 16))))
    assert dec.active_per_token.shape == (36,)
    assert np.all(dec.active_per_token == 3)


def test_shared_experts_persist_without_routed_output():
    moe = MoEFFN(D, 16, routed=4, top_k=2, shared=2, rng=rng())
    a, _ = moe.mix(Tensor(rng(6).normal(size=(3, D))), routed_scale=0.0)
    b, _ = moe.mix(Tensor(rng(7).normal(size=(3, D))), routed_scale=0.0)
    assert np.abs(a.data).max() > 1e-3
    assert not np.allclose(a.data, b.data)
    shared_mean = np.mean([e(Tensor(rng(6).normal(size=(3, D)))).data for e in moe.shared], axis=0)
    np.testing.assert_allclose(a.data, shared_mean, atol=1e-6)


def test_moe_ffn_wrapper_keeps_tags():
    moe = MoEFFN(D, 16, routed=4, top_k=2, shared=1, rng=rng())
    seq = TokenSequence(Tensor(rng().normal(size=(1, 4, D))), ("F1", "F2", "CNN", "CNN"))
    out, dec = moe_ffn(seq, moe)
    assert out.type_tags == seq.type_tags and out.tokens.shape == (1, 4, D)
    assert dec.probs.shape == (4, 4)


# -- load balance ------------------------------------------------------------------


def numpy_load_balance(logits, k):
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    n, e = p.shape
    counts = np.zeros(e)
    for row in p:
        for i in np.argsort(-row, kind="stable")[:k]:
            counts[i] += 1
    return e * float(np.sum(counts / (n * k) * p.mean(axis=0)))


def test_uniform_routing_gives_one():
    logits = np.eye(4) * 3.0  # each expert favoured by exactly one token
    loss = load_balance_loss([route_logits(Tensor(logits), 1)])
    assert loss.item() == pytest.approx(1.0, abs=1e-6)


def test_collapsed_routing_gives_e():
    logits = np.zeros((10, 4))
    logits[:, 2] = 1000.0
    assert load_balance_loss([route_logits(Tensor(logits), 1)]).item() == pytest.approx(4.0, abs=1e-6)


def test_random_logits_e4_k2_batch64():
    logits = rng(8).normal(size=(64, 4))
    with default_dtype(np.float64):
        value = load_balance_loss([route_logits(Tensor(logits), 2)]).item()
    assert value == pytest.approx(numpy_load_balance(logits, 2), abs=1e-12)
    assert 1.0 < value <= 4.0


def test_load_balance_averages_layers_and_differentiates_probs():
    logits = Tensor(rng(9).normal(size=(6, 4)), requires_grad=True)
    a, b = route_logits(logits, 2), route_logits(Tensor(np.eye(4) * 3.0), 1)
    loss = load_balance_loss([a, b])
    assert loss.item() == pytest.approx((numpy_load_balance(logits.data, 2) + 1.0) / 2, abs=1e-5)
    loss.backward()
    assert logits.grad is not None and np.any(logits.grad != 0)


def test_load_balance_bounds_random():
    r = rng(10)
    for _ in range(50):
        e = int(r.integers(2, 9))
        k = int(r.integers(1, e + 1))
        logits = r.normal(size=(int(r.integers(1, 40)), e)) * r.uniform(0.1, 5.0)
        v = load_balance_loss([route_logits(Tensor(logits), k)]).item()
        assert 0.0 <= v <= e + 1e-5


def test_load_balance_requires_a_layer():
    with pytest.raises(ContractError):
        load_balance_loss([])


# -- encoder ------------------------------------------------------------------------


def test_empty_stack_is_final_layer_norm():
    enc = TransformerEncoder(D, 0, 2, 16, 4, 2, 1, rng())
    x = Tensor(rng(1).normal(size=(2, 3, D)))
    y, decisions = enc(x)
    np.testing.assert_allclose(y.data, T.layer_norm(x, enc.final_norm.gain, enc.final_norm.bias).data, atol=1e-6)
    assert decisions == []


def test_encoder_shape_and_stats_per_layer():
    enc = TransformerEncoder(16, 3, 4, 16, 4, 2, 1, rng(), moe_layers=[0, 2])
    seq = TokenSequence(Tensor(rng(1).normal(size=(2, 7, 16))), ("F1",) * 7)
    out, decisions = forward_encoder(seq, enc)
    assert out.tokens.shape == (2, 7, 16)
    assert len(decisions) == 2
    assert isinstance(enc.ffn[1], DenseFFN)


def test_dense_control_has_no_router():
    enc = TransformerEncoder(16, 2, 4, 16, 4, 2, 1, rng(), moe_enabled=False)
    assert not enc.has_moe
    _, decisions = enc(Tensor(rng(1).normal(size=(1, 3, 16))))
    assert decisions == []


def test_encoder_permutation_equivariance():
    enc = TransformerEncoder(16, 2, 4, 16, 4, 2, 2, rng())
    x = rng(1).normal(size=(1, 9, 16))
    perm = rng(2).permutation(9)
    a, _ = enc(Tensor(x))
    b, _ = enc(Tensor(x[:, perm]))
    np.testing.assert_allclose(b.data[0], a.data[0][perm], atol=1e-5)


def test_desk_model_finite_difference_on_random_parameters():
    cfg = load_config(profile="desk", overrides={"seed": 0, "data.n": 20})
    with default_dtype(np.float64):
        model = build_model(cfg)
        train, _, _ = make_dataset(20, seed=0)
        images, gaze = train.images[:2].astype(np.float64), train.gaze[:2]
        frozen = model.encoders.frozen_features(images)

        def loss():
            out = model(images, frozen)
            return total_loss(angular_loss(out.prediction, gaze), load_balance_loss(out.decisions),
                              cfg.model.load_balance_coeff)

        named = dict(model.named_parameters())
        model.zero_grad()
        loss().backward()
        r = rng(11)
        picks = [sorted(named)[i] for i in r.choice(len(named), size=5, replace=False)]
        h = 1e-3
        for name in picks:
            p = named[name]
            idx = tuple(int(r.integers(s)) for s in p.shape)
            analytic = p.grad[idx]
            orig = p.data[idx]
            with T.no_grad():
                p.data[idx] = orig + h
                plus = loss().item()
                p.data[idx] = orig - h
                minus = loss().item()
                p.data[idx] = orig
            numeric = (plus - minus) / (2 * h)
            assert relative_errors(np.array(analytic), np.array(numeric)) < 1e-3, name


def test_two_layer_toy_model_full_gradcheck():
    from gazemoe.diagnostics import run_gradcheck

    cfg = load_config(profile="tiny", overrides={
        "model.layers": 2, "model.routed_experts": 2, "model.top_k": 1, "model.expert_ffn_dim": 2,
        "model.feature_dim": 2, "model.cnn_channels": 1})
    # key biases have an exactly zero gradient, so h must stay large enough that
    # roundoff stays below the 1e-8 floor, and small enough to avoid selection kinks
    rep = run_gradcheck(cfg, step=3e-5)
    assert rep.parameters <= 500
    assert rep.passed, rep.group_errors
