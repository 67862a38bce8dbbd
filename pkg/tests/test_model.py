"""Prompt network, losses, and optimizer against independent oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddcg.encoder import TextEncoderStub, encode_text
from feddcg.errors import ContractError
from feddcg.model import (
    OptimizerState,
    ce_loss,
    class_scores,
    cosine_lr,
    init_prompt_bank,
    init_prompt_net,
    map_params,
    params_to_vector,
    prompt_net_forward,
    sgd_step,
    softmax_probs,
    stage_a_loss_and_grad,
    stage_b_loss_and_grad,
    vector_to_params,
    zeros_like_params,
)

from feddcg_testlib import manual_store


# -- prompt network forward --------------------------------------------------

def test_zero_weight_network_passes_only_bias():
    params = init_prompt_net(0, l_p=3, d_h=8, token_dim=6, head_count=2)
    bias = np.arange(6, dtype=np.float64)
    params = map_params(np.zeros_like, params)
    params.mlp_b2 = bias
    out = prompt_net_forward(params, np.random.default_rng(0).normal(size=(5, 6)))
    assert out.shape == (3, 6)
    assert np.array_equal(out, np.tile(bias, (3, 1)))


def test_forward_reference_shapes():
    # 4 heads over hidden width 512, 20 classes of 4 tokens each
    params = init_prompt_net(1, l_p=4, d_h=512, token_dim=512, head_count=4)
    tokens = np.random.default_rng(1).normal(size=(80, 512))
    assert prompt_net_forward(params, tokens).shape == (4, 512)


def straight_line_attention(params, tokens):
    """Independent dense-math reimplementation: explicit per-head loops."""
    l_p, d_h = params.query.shape
    heads = params.head_count
    hd = d_h // heads
    k_full = tokens @ params.w_k
    v_full = tokens @ params.w_v
    out_heads = []
    for h in range(heads):
        q = params.query[:, h * hd : (h + 1) * hd]
        k = k_full[:, h * hd : (h + 1) * hd]
        v = v_full[:, h * hd : (h + 1) * hd]
        scores = q @ k.T / math.sqrt(d_h / heads)
        attn = np.empty_like(scores)
        for i in range(scores.shape[0]):
            row = np.exp(scores[i] - scores[i].max())
            attn[i] = row / row.sum()
        out_heads.append(attn @ v)
    concat = np.concatenate(out_heads, axis=1)
    u = concat @ params.w_o
    h1 = u @ params.mlp_w1 + params.mlp_b1
    r = np.where(h1 > 0, h1, 0.0)
    return r @ params.mlp_w2 + params.mlp_b2


def test_forward_matches_dense_math_oracle():
    params = init_prompt_net(5, l_p=4, d_h=8, token_dim=10, head_count=2)
    tokens = np.random.default_rng(5).normal(size=(9, 10))  # 3 classes x 3 tokens
    got = prompt_net_forward(params, tokens)
    want = straight_line_attention(params, tokens)
    assert np.abs(got - want).max() < 1e-12


def test_forward_rejects_shape_mismatch():
    params = init_prompt_net(0, l_p=2, d_h=8, token_dim=6, head_count=2)
    with pytest.raises(ValueError):
        prompt_net_forward(params, np.ones((3, 7)))
    with pytest.raises(ValueError):
        prompt_net_forward(params, np.ones((0, 6)))


# -- scores / softmax / loss -------------------------------------------------

def test_class_scores_self_similarity():
    feats = np.eye(4)[:3]
    assert class_scores(feats[2], feats)[2] == pytest.approx(1.0)
    assert class_scores(feats[0], feats)[1] == pytest.approx(0.0)


def test_class_scores_matches_cos_formula():
    rng = np.random.default_rng(9)
    image = rng.normal(size=16)
    image /= np.linalg.norm(image)
    feats = rng.normal(size=(5, 16))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    got = class_scores(image, feats)
    for j in range(5):
        want = np.sum(image * feats[j]) / (np.linalg.norm(image) * np.linalg.norm(feats[j]))
        assert abs(got[j] - want) < 1e-12
    assert np.all(np.abs(got) <= 1.0 + 1e-12)


def test_class_scores_contract():
    with pytest.raises(ContractError):
        class_scores(np.array([2.0, 0.0]), np.eye(2))
    with pytest.raises(ContractError):
        class_scores(np.array([1.0, 0.0]), np.array([[3.0, 0.0]]))


def test_softmax_uniform():
    assert np.allclose(softmax_probs(np.zeros(4), 1.0), 0.25)


def test_softmax_two_class_closed_form():
    probs = softmax_probs(np.array([1.0, 0.0]), 1.0)
    assert np.allclose(probs, [0.73106, 0.26894], atol=1e-5)


def test_softmax_tau_keeps_argmax():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=6)
    argmaxes = {int(np.argmax(softmax_probs(scores, tau))) for tau in (0.01, 1.0, 100.0)}
    assert len(argmaxes) == 1


def test_softmax_rejects_bad_tau():
    with pytest.raises(ValueError):
        softmax_probs(np.zeros(3), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_sums_to_one_and_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=rng.integers(2, 8)) * 10
    tau = float(rng.uniform(0.05, 5.0))
    probs = softmax_probs(scores, tau)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert np.allclose(probs, softmax_probs(scores + 3.7, tau), atol=1e-12)


def test_ce_loss_uniform_is_ln_n():
    assert ce_loss(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-12)


def test_ce_loss_certain_is_zero():
    assert ce_loss(np.array([0.0, 1.0]), 1) == pytest.approx(0.0)


def test_ce_loss_scalar_oracle():
    # -ln(1 / (1 + e)) for the two-class unit-margin softmax
    probs = softmax_probs(np.array([1.0, 0.0]), 1.0)
    assert ce_loss(probs, 1) == pytest.approx(1.3132616875, abs=1e-9)


def test_ce_loss_label_range():
    with pytest.raises(ValueError):
        ce_loss(np.full(3, 1 / 3), 3)


# -- stage losses ------------------------------------------------------------

def _stage_a_setup(seed=0, identical_tokens=False):
    store = manual_store(seed=seed, identical_tokens=identical_tokens)
    stub = TextEncoderStub.create(seed, store.token_dim, store.dim)
    params = init_prompt_net(seed, l_p=3, d_h=8, token_dim=store.token_dim, head_count=2)
    batch = np.arange(4)
    classes = np.arange(store.num_classes)
    return store, stub, params, batch, classes


def test_stage_a_duplication_invariance():
    store, stub, params, batch, classes = _stage_a_setup()
    loss1, grad1 = stage_a_loss_and_grad(params, stub, store, batch, classes)
    doubled = np.concatenate([batch, batch])
    loss2, grad2 = stage_a_loss_and_grad(params, stub, store, doubled, classes)
    assert loss1 == pytest.approx(loss2, abs=1e-12)
    assert np.allclose(params_to_vector(grad1), params_to_vector(grad2), atol=1e-12)


def test_stage_a_rejects_empty_batch():
    store, stub, params, _, classes = _stage_a_setup()
    with pytest.raises(ValueError):
        stage_a_loss_and_grad(params, stub, store, np.array([], dtype=int), classes)


def test_stage_a_rejects_foreign_class():
    store, stub, params, batch, _ = _stage_a_setup()
    with pytest.raises(ValueError):
        stage_a_loss_and_grad(params, stub, store, batch, [1])


def test_stage_a_constant_network_uniform_loss():
    # With every class sharing one token block, a constant-output network
    # gives identical features for every class: probs uniform, loss ln n.
    store, stub, params, batch, classes = _stage_a_setup(identical_tokens=True)
    constant = zeros_like_params(params)
    constant.mlp_b2 = np.full(store.token_dim, 0.3)
    loss, _ = stage_a_loss_and_grad(constant, stub, store, batch, classes)
    assert loss == pytest.approx(math.log(store.num_classes), abs=1e-12)


def test_stage_a_gradient_vs_finite_differences():
    store, stub, params, batch, classes = _stage_a_setup(seed=2)
    _, grads = stage_a_loss_and_grad(params, stub, store, batch, classes)
    analytic = params_to_vector(grads)

    vec = params_to_vector(params)
    numeric = np.empty_like(vec)
    eps = 1e-6
    for i in range(vec.size):
        up, down = vec.copy(), vec.copy()
        up[i] += eps
        down[i] -= eps
        lu, _ = stage_a_loss_and_grad(vector_to_params(params, up), stub, store, batch, classes)
        ld, _ = stage_a_loss_and_grad(vector_to_params(params, down), stub, store, batch, classes)
        numeric[i] = (lu - ld) / (2 * eps)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    assert np.abs(analytic - numeric).max() / scale < 1e-5


def _stage_b_setup(seed=0):
    store = manual_store(seed=seed)
    stub = TextEncoderStub.create(seed, store.token_dim, store.dim)
    bank = init_prompt_bank(seed, store.num_domains, 3, 3, store.token_dim)
    batch = np.where(store.image_domain == 0)[0][:5]
    return store, stub, bank, batch


def test_stage_b_mix_one_freezes_domain_path():
    store, stub, bank, batch = _stage_b_setup()
    _, grad_g, grad_d = stage_b_loss_and_grad(bank, 0, stub, store, batch, 0.1, 1.0)
    assert np.all(grad_d == 0.0)
    assert np.any(grad_g != 0.0)


def test_stage_b_mix_zero_freezes_global_path():
    store, stub, bank, batch = _stage_b_setup()
    _, grad_g, grad_d = stage_b_loss_and_grad(bank, 0, stub, store, batch, 0.1, 0.0)
    assert np.all(grad_g == 0.0)
    assert np.any(grad_d != 0.0)


def test_stage_b_rejects_bad_domain():
    store, stub, bank, batch = _stage_b_setup()
    with pytest.raises(ValueError):
        stage_b_loss_and_grad(bank, 5, stub, store, batch, 0.1, 0.5)


def test_stage_b_rejects_foreign_domain_batch():
    store, stub, bank, _ = _stage_b_setup()
    foreign = np.where(store.image_domain == 1)[0][:3]
    with pytest.raises(ValueError):
        stage_b_loss_and_grad(bank, 0, stub, store, foreign, 0.1, 0.5)


def test_stage_b_gradient_vs_finite_differences():
    store, stub, bank, batch = _stage_b_setup(seed=3)
    tau, mix = 0.1, 0.5
    _, grad_g, grad_d = stage_b_loss_and_grad(bank, 0, stub, store, batch, tau, mix)
    analytic = np.concatenate([grad_g.ravel(), grad_d.ravel()])

    g_size = bank.global_prompt.size

    def loss_at(vec):
        bank.global_prompt = vec[:g_size].reshape(bank.global_prompt.shape)
        bank.domain_prompts[0] = vec[g_size:].reshape(bank.domain_prompts[0].shape)
        return stage_b_loss_and_grad(bank, 0, stub, store, batch, tau, mix)[0]

    start = np.concatenate([bank.global_prompt.ravel(), bank.domain_prompts[0].ravel()])
    numeric = np.empty_like(start)
    eps = 1e-6
    for i in range(start.size):
        up, down = start.copy(), start.copy()
        up[i] += eps
        down[i] -= eps
        numeric[i] = (loss_at(up) - loss_at(down)) / (2 * eps)
    loss_at(start)  # restore
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    assert np.abs(analytic - numeric).max() / scale < 1e-5


def test_stage_gradients_do_not_cross():
    # Stage A never reads the bank; stage B never reads net params. Assert
    # the strongest observable form: bitwise-unchanged inputs.
    store, stub, params, batch, classes = _stage_a_setup(seed=4)
    bank = init_prompt_bank(4, store.num_domains, 3, 3, store.token_dim)
    bank_bytes = bank.global_prompt.tobytes() + b"".join(
        p.tobytes() for p in bank.domain_prompts
    )
    stage_a_loss_and_grad(params, stub, store, batch, classes)
    assert bank.global_prompt.tobytes() + b"".join(
        p.tobytes() for p in bank.domain_prompts
    ) == bank_bytes

    params_bytes = params_to_vector(params).tobytes()
    dom_batch = np.where(store.image_domain == 0)[0][:4]
    stage_b_loss_and_grad(bank, 0, stub, store, dom_batch, 0.1, 0.5)
    assert params_to_vector(params).tobytes() == params_bytes


# -- optimizer ---------------------------------------------------------------

def test_cosine_lr_endpoints_and_midpoint():
    opt = OptimizerState(base_lr=1e-3, total_steps=100, step=0, min_lr=0.0)
    assert cosine_lr(opt) == pytest.approx(1e-3)
    opt.step = 100
    assert cosine_lr(opt) == pytest.approx(0.0, abs=1e-18)
    opt.step = 50
    assert cosine_lr(opt) == pytest.approx(5e-4)


def test_cosine_lr_rejects_zero_total():
    with pytest.raises(ValueError):
        cosine_lr(OptimizerState(base_lr=1e-3, total_steps=0))


def test_sgd_zero_grad_is_identity():
    opt = OptimizerState(base_lr=1e-3, total_steps=10)
    values = np.array([1.0, -2.0])
    out = sgd_step(values, np.zeros(2), opt)
    assert np.array_equal(out, values)
    assert opt.step == 1


def test_sgd_single_arithmetic_step():
    opt = OptimizerState(base_lr=1e-3, total_steps=10)
    out = sgd_step(np.array([1.0]), np.array([2.0]), opt)
    assert out[0] == pytest.approx(0.998)


def test_sgd_descends_quadratic():
    # 10 steps on f(v) = 0.5 * ||v||^2, gradient v: norm strictly decreases
    opt = OptimizerState(base_lr=0.1, total_steps=10)
    v = np.array([1.0, 1.0])
    for _ in range(10):
        before = np.linalg.norm(v)
        v = sgd_step(v, v, opt)
        assert np.linalg.norm(v) < before


def test_sgd_params_shape_check():
    opt = OptimizerState(base_lr=1e-3, total_steps=5)
    with pytest.raises(ValueError):
        sgd_step(np.zeros(3), np.zeros(4), opt)
