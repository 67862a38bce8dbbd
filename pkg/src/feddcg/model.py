"""Prompt network, prompt bank, classification losses, and SGD.

All math is hand-written numpy in float64 with exact analytic gradients:
multi-head cross-attention from a learnable query over class tokens, a
two-layer relu head mapping back to token space, and the cosine/temperature
softmax/cross-entropy chain. No autograd anywhere; every backward pass here
is checked against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import (
    EncodeCache,
    TextEncoderStub,
    encode_text_backward,
    encode_text_cached,
)
from .errors import ContractError

# Seed sub-stream tags, disjoint from the generator's.
_NET_INIT_STREAM = 0x4E455449
_BANK_INIT_STREAM = 0x42414E4B

PARAM_FIELDS = ("query", "w_k", "w_v", "w_o", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


@dataclass
class PromptNetParams:
    """Learnable state of one domain group's prompt-generation network.

    The network maps a stack of class tokens [S x token_dim] to L_p prompt
    token vectors [L_p x token_dim]: scaled dot-product attention of the
    learnable query against projected keys/values, heads concatenated and
    projected by w_o, then a two-layer perceptron with relu.
    """

    query: np.ndarray    # [l_p, d_h]
    w_k: np.ndarray      # [token_dim, d_h]
    w_v: np.ndarray      # [token_dim, d_h]
    w_o: np.ndarray      # [d_h, d_h]
    mlp_w1: np.ndarray   # [d_h, d_h]
    mlp_b1: np.ndarray   # [d_h]
    mlp_w2: np.ndarray   # [d_h, token_dim]
    mlp_b2: np.ndarray   # [token_dim]
    head_count: int = 4

    @property
    def l_p(self) -> int:
        return int(self.query.shape[0])

    @property
    def d_h(self) -> int:
        return int(self.query.shape[1])

    @property
    def token_dim(self) -> int:
        return int(self.w_k.shape[0])

    def validate(self) -> None:
        d_h, t = self.d_h, self.token_dim
        if self.head_count < 1 or d_h % self.head_count != 0:
            raise ValueError(f"d_h={d_h} not divisible by head_count={self.head_count}")
        expected = {
            "query": (self.l_p, d_h),
            "w_k": (t, d_h),
            "w_v": (t, d_h),
            "w_o": (d_h, d_h),
            "mlp_w1": (d_h, d_h),
            "mlp_b1": (d_h,),
            "mlp_w2": (d_h, t),
            "mlp_b2": (t,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")


def _seed_list(seed) -> list[int]:
    return [int(s) for s in np.atleast_1d(seed)]


def init_prompt_net(
    seed, l_p: int, d_h: int, token_dim: int, head_count: int = 4
) -> PromptNetParams:
    """Seeded Gaussian init (std 0.02), biases zero; seed may be a sequence."""
    rng = np.random.default_rng([_NET_INIT_STREAM, *_seed_list(seed)])
    draw = lambda *shape: rng.normal(scale=0.02, size=shape)
    params = PromptNetParams(
        query=draw(l_p, d_h),
        w_k=draw(token_dim, d_h),
        w_v=draw(token_dim, d_h),
        w_o=draw(d_h, d_h),
        mlp_w1=draw(d_h, d_h),
        mlp_b1=np.zeros(d_h),
        mlp_w2=draw(d_h, token_dim),
        mlp_b2=np.zeros(token_dim),
        head_count=head_count,
    )
    params.validate()
    return params


def map_params(fn, *params: PromptNetParams) -> PromptNetParams:
    """Apply fn elementwise across the float fields of one or more params."""
    out = {name: fn(*(getattr(p, name) for p in params)) for name in PARAM_FIELDS}
    return PromptNetParams(**out, head_count=params[0].head_count)


def zeros_like_params(params: PromptNetParams) -> PromptNetParams:
    return map_params(np.zeros_like, params)


def copy_params(params: PromptNetParams) -> PromptNetParams:
    return map_params(np.copy, params)


def add_params(a: PromptNetParams, b: PromptNetParams) -> PromptNetParams:
    return map_params(np.add, a, b)


def sub_params(a: PromptNetParams, b: PromptNetParams) -> PromptNetParams:
    return map_params(np.subtract, a, b)


def scale_params(a: PromptNetParams, c: float) -> PromptNetParams:
    return map_params(lambda x: x * c, a)


def params_equal(a: PromptNetParams, b: PromptNetParams) -> bool:
    return a.head_count == b.head_count and all(
        np.array_equal(getattr(a, n), getattr(b, n)) for n in PARAM_FIELDS
    )


def params_to_vector(params: PromptNetParams) -> np.ndarray:
    return np.concatenate([getattr(params, n).ravel() for n in PARAM_FIELDS])


def vector_to_params(template: PromptNetParams, vec: np.ndarray) -> PromptNetParams:
    out = {}
    pos = 0
    for name in PARAM_FIELDS:
        ref = getattr(template, name)
        out[name] = vec[pos : pos + ref.size].reshape(ref.shape).copy()
        pos += ref.size
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, params need {pos}")
    return PromptNetParams(**out, head_count=template.head_count)


@dataclass
class NetCache:
    """Intermediates of one prompt_net_forward pass, kept for backward."""

    tokens: np.ndarray   # [S, token_dim]
    k: np.ndarray        # [H, S, hd]
    v: np.ndarray        # [H, S, hd]
    attn: np.ndarray     # [H, l_p, S]
    concat: np.ndarray   # [l_p, d_h]
    u: np.ndarray        # [l_p, d_h] post output projection
    h1: np.ndarray       # [l_p, d_h] pre-relu
    r: np.ndarray        # [l_p, d_h] post-relu


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    rows, width = x.shape
    return x.reshape(rows, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, rows, hd = x.shape
    return x.transpose(1, 0, 2).reshape(rows, heads * hd)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def prompt_net_forward_cached(
    params: PromptNetParams, class_tokens: np.ndarray
) -> tuple[np.ndarray, NetCache]:
    tokens = np.asarray(class_tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"class_tokens must be a nonempty 2-D matrix, got shape {tokens.shape}")
    if tokens.shape[1] != params.token_dim:
        raise ValueError(
            f"class_tokens width {tokens.shape[1]} != params token_dim {params.token_dim}"
        )
    if not np.all(np.isfinite(tokens)):
        raise ValueError("class_tokens contains non-finite entries")

    heads = params.head_count
    scale = 1.0 / math.sqrt(params.d_h / heads)
    k = _split_heads(tokens @ params.w_k, heads)          # [H, S, hd]
    v = _split_heads(tokens @ params.w_v, heads)
    q = _split_heads(params.query, heads)                 # [H, l_p, hd]
    attn = _softmax_rows(q @ k.transpose(0, 2, 1) * scale)  # [H, l_p, S]
    concat = _merge_heads(attn @ v)                       # [l_p, d_h]
    u = concat @ params.w_o
    h1 = u @ params.mlp_w1 + params.mlp_b1
    r = np.maximum(h1, 0.0)
    out = r @ params.mlp_w2 + params.mlp_b2               # [l_p, token_dim]
    return out, NetCache(tokens=tokens, k=k, v=v, attn=attn, concat=concat, u=u, h1=h1, r=r)


def prompt_net_forward(params: PromptNetParams, class_tokens: np.ndarray) -> np.ndarray:
    return prompt_net_forward_cached(params, class_tokens)[0]


def prompt_net_backward(
    params: PromptNetParams, cache: NetCache, d_out: np.ndarray
) -> PromptNetParams:
    """Exact gradient of sum(d_out * forward(params, tokens)) w.r.t. params."""
    heads = params.head_count
    scale = 1.0 / math.sqrt(params.d_h / heads)

    d_w2 = cache.r.T @ d_out
    d_b2 = d_out.sum(axis=0)
    d_r = d_out @ params.mlp_w2.T
    d_h1 = d_r * (cache.h1 > 0.0)
    d_w1 = cache.u.T @ d_h1
    d_b1 = d_h1.sum(axis=0)
    d_u = d_h1 @ params.mlp_w1.T
    d_wo = cache.concat.T @ d_u
    d_concat = d_u @ params.w_o.T

    d_o = _split_heads(d_concat, heads)                   # [H, l_p, hd]
    d_attn = d_o @ cache.v.transpose(0, 2, 1)             # [H, l_p, S]
    d_v = cache.attn.transpose(0, 2, 1) @ d_o             # [H, S, hd]
    # Softmax backward per row: dz = a * (da - sum(da * a)).
    d_z = cache.attn * (d_attn - (d_attn * cache.attn).sum(axis=-1, keepdims=True))
    d_q = d_z @ cache.k * scale                           # [H, l_p, hd]
    d_k = d_z.transpose(0, 2, 1) @ _split_heads(params.query, heads) * scale  # [H, S, hd]

    return PromptNetParams(
        query=_merge_heads(d_q),
        w_k=cache.tokens.T @ _merge_heads(d_k),
        w_v=cache.tokens.T @ _merge_heads(d_v),
        w_o=d_wo,
        mlp_w1=d_w1,
        mlp_b1=d_b1,
        mlp_w2=d_w2,
        mlp_b2=d_b2,
        head_count=heads,
    )


@dataclass
class PromptBank:
    """Global prompt, per-domain prompts, and their aggregation histories.

    prompt_history[d] holds the sequence of post-aggregation snapshots of
    domain d's prompt, oldest first, starting with the initial value. It is
    append-only and only momentum averaging reads it.
    """

    global_prompt: np.ndarray            # [l_g, token_dim]
    domain_prompts: list[np.ndarray]     # M x [l_d, token_dim]
    prompt_history: list[list[np.ndarray]]

    @property
    def num_domains(self) -> int:
        return len(self.domain_prompts)

    def validate(self) -> None:
        if len(self.prompt_history) != self.num_domains:
            raise ValueError("prompt_history length != number of domains")
        if not np.all(np.isfinite(self.global_prompt)):
            raise ValueError("global prompt contains non-finite entries")
        for d, prompt in enumerate(self.domain_prompts):
            if not np.all(np.isfinite(prompt)):
                raise ValueError(f"domain prompt {d} contains non-finite entries")
            if not self.prompt_history[d]:
                raise ValueError(f"domain {d} has empty prompt history")


def init_prompt_bank(
    seed, num_domains: int, l_g: int, l_d: int, token_dim: int
) -> PromptBank:
    """Seeded Gaussian prompts (std 0.02); history starts at the init value."""
    rng = np.random.default_rng([_BANK_INIT_STREAM, *_seed_list(seed)])
    global_prompt = rng.normal(scale=0.02, size=(l_g, token_dim))
    domain_prompts = [rng.normal(scale=0.02, size=(l_d, token_dim)) for _ in range(num_domains)]
    history = [[p.copy()] for p in domain_prompts]
    return PromptBank(global_prompt=global_prompt, domain_prompts=domain_prompts,
                      prompt_history=history)


def bank_copy(bank: PromptBank) -> PromptBank:
    return PromptBank(
        global_prompt=bank.global_prompt.copy(),
        domain_prompts=[p.copy() for p in bank.domain_prompts],
        prompt_history=[[v.copy() for v in hist] for hist in bank.prompt_history],
    )


def bank_equal(a: PromptBank, b: PromptBank) -> bool:
    return (
        np.array_equal(a.global_prompt, b.global_prompt)
        and len(a.domain_prompts) == len(b.domain_prompts)
        and all(np.array_equal(x, y) for x, y in zip(a.domain_prompts, b.domain_prompts))
        and len(a.prompt_history) == len(b.prompt_history)
        and all(
            len(ha) == len(hb) and all(np.array_equal(x, y) for x, y in zip(ha, hb))
            for ha, hb in zip(a.prompt_history, b.prompt_history)
        )
    )


def class_scores(image_emb: np.ndarray, text_features: np.ndarray) -> np.ndarray:
    """Cosine of a unit image embedding against unit text feature rows.

    Under the unit-norm precondition cosine is a plain dot product; the
    precondition is enforced to 1e-4 so violations surface at the call site
    instead of as silently rescaled scores.
    """
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_features = np.asarray(text_features, dtype=np.float64)
    if abs(np.linalg.norm(image_emb) - 1.0) > 1e-4:
        raise ContractError(f"image embedding norm {np.linalg.norm(image_emb):.6f} is not 1")
    feat_norms = np.linalg.norm(text_features, axis=1)
    worst = float(np.abs(feat_norms - 1.0).max())
    if worst > 1e-4:
        raise ContractError(f"text feature norm deviates from 1 by {worst:.2e}")
    return text_features @ image_emb


def softmax_probs(scores: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax with max-subtraction: p_j = exp(s_j/tau)/sum."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    return _softmax_rows(scores / tau)


def ce_loss(probs: np.ndarray, label: int) -> float:
    if not 0 <= label < len(probs):
        raise ValueError(f"label {label} out of range for {len(probs)} classes")
    return float(-np.log(probs[label]))


def _encode_class_features(
    stub: TextEncoderStub, prompt: np.ndarray, class_tokens: np.ndarray
) -> tuple[np.ndarray, list[EncodeCache]]:
    """Encode one prompt block against each class's token block."""
    features = np.empty((class_tokens.shape[0], stub.dim))
    caches: list[EncodeCache] = []
    for j in range(class_tokens.shape[0]):
        features[j], cache = encode_text_cached(stub, prompt, class_tokens[j])
        caches.append(cache)
    return features, caches


def _prompt_grad_rows(
    stub: TextEncoderStub, caches: list[EncodeCache], d_features: np.ndarray, l_rows: int
) -> np.ndarray:
    """Fold per-class feature gradients back onto a shared prompt block.

    Mean pooling gives every token row of one encode call the same gradient
    row, and the prompt block is shared across classes, so the prompt
    gradient is the tiled sum of per-class rows.
    """
    row = np.zeros(stub.token_dim)
    for j, cache in enumerate(caches):
        row += encode_text_backward(stub, cache, d_features[j])
    return np.tile(row, (l_rows, 1))


def stage_a_loss_and_grad(
    params: PromptNetParams,
    stub: TextEncoderStub,
    store,
    batch,
    client_classes,
    tau: float = 0.07,
) -> tuple[float, PromptNetParams]:
    """Mean CE of the class-grouping chain and its exact parameter gradient.

    Chain: prompt network over the client's class tokens -> text feature per
    class -> cosine against each batch image -> temperature softmax -> CE.
    Labels are positions within client_classes; prompts in the bank are not
    inputs to this chain and receive no gradient by construction.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    classes = np.asarray(client_classes, dtype=np.int64)
    if classes.size == 0:
        raise ValueError("client_classes must be nonempty")

    class_pos = {int(c): i for i, c in enumerate(classes)}
    labels = np.array([class_pos.get(int(c), -1) for c in store.image_class[batch]])
    if (labels < 0).any():
        raise ValueError("batch contains an image whose class is not in client_classes")

    tokens = store.class_token_embeddings[classes].astype(np.float64)  # [n, L_tok, t]
    flat = tokens.reshape(-1, tokens.shape[-1])
    prompt, net_cache = prompt_net_forward_cached(params, flat)
    features, enc_caches = _encode_class_features(stub, prompt, tokens)

    x = store.image_embeddings[batch].astype(np.float64)
    probs = softmax_probs(x @ features.T, tau)            # [B, n] (rows)
    n = batch.size
    loss = float(-np.log(probs[np.arange(n), labels]).mean())

    d_scores = probs.copy()
    d_scores[np.arange(n), labels] -= 1.0
    d_scores /= n * tau
    d_features = d_scores.T @ x                           # [n, dim]
    d_prompt = _prompt_grad_rows(stub, enc_caches, d_features, params.l_p)
    return loss, prompt_net_backward(params, net_cache, d_prompt)


def stage_b_loss_and_grad(
    bank: PromptBank,
    domain_index: int,
    stub: TextEncoderStub,
    store,
    batch,
    tau: float,
    mix: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean CE of the decoupled-prompt chain; exact grads for P_G and one P_D.

    Per class: score = mix * cos(x, encode(global prompt, tokens_j)) +
    (1 - mix) * cos(x, encode(domain prompt, tokens_j)), softmaxed at tau.
    The prompt network plays no part here and receives no gradient.
    """
    if not 0 <= domain_index < bank.num_domains:
        raise ValueError(f"domain_index {domain_index} out of range")
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1], got {mix}")
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if (store.image_domain[batch] != domain_index).any():
        raise ValueError("batch contains an image outside the trained domain")

    tokens = store.class_token_embeddings.astype(np.float64)
    feats_g, caches_g = _encode_class_features(stub, bank.global_prompt, tokens)
    feats_d, caches_d = _encode_class_features(stub, bank.domain_prompts[domain_index], tokens)

    x = store.image_embeddings[batch].astype(np.float64)
    labels = store.image_class[batch]
    scores = mix * (x @ feats_g.T) + (1.0 - mix) * (x @ feats_d.T)
    probs = softmax_probs(scores, tau)
    n = batch.size
    loss = float(-np.log(probs[np.arange(n), labels]).mean())

    d_scores = probs.copy()
    d_scores[np.arange(n), labels] -= 1.0
    d_scores /= n * tau
    d_mixed = d_scores.T @ x                              # [C, dim]
    grad_global = _prompt_grad_rows(stub, caches_g, mix * d_mixed, bank.global_prompt.shape[0])
    grad_domain = _prompt_grad_rows(
        stub, caches_d, (1.0 - mix) * d_mixed, bank.domain_prompts[domain_index].shape[0]
    )
    return loss, grad_global, grad_domain


@dataclass
class OptimizerState:
    """Plain SGD with cosine-annealed learning rate."""

    base_lr: float = 1e-3
    total_steps: int = 1
    step: int = 0
    min_lr: float = 0.0

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps == 0:
            raise ValueError("total_steps must be nonzero")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError("step must lie in [0, total_steps]")


def cosine_lr(opt: OptimizerState) -> float:
    opt.validate()
    return opt.min_lr + 0.5 * (opt.base_lr - opt.min_lr) * (
        1.0 + math.cos(math.pi * opt.step / opt.total_steps)
    )


def sgd_step(values, grads, opt: OptimizerState):
    """One step value <- value - lr * grad; advances opt.step by one.

    Accepts either a PromptNetParams pair or a plain array pair, returning
    the same type; the caller owns opt and its mutation.
    """
    lr = cosine_lr(opt)
    opt.step += 1
    if isinstance(values, PromptNetParams):
        if not isinstance(grads, PromptNetParams):
            raise ValueError("params update requires PromptNetParams gradients")
        return map_params(lambda v, g: v - lr * g, values, grads)
    values = np.asarray(values, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if values.shape != grads.shape:
        raise ValueError(f"value shape {values.shape} != grad shape {grads.shape}")
    return values - lr * grads
