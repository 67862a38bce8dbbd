"""Test-time aggregation across per-domain classifiers plus a global path.

Each trained domain contributes one scoring path: its prompt network is run
over the evaluation classes' tokens (which may be classes never seen in
training), giving per-class text features. The global prompt contributes
one more path. The three aggregators differ only in how paths are weighted:

  domain_guided  - softmax over the image's similarity to each domain
                   prompt (plus the global prompt) at temperature tau_w.
  average        - uniform weights over all paths.
  uncertainty    - weights proportional to inverse prediction entropy.

Mixed scores pass through a final temperature softmax to yield the class
distribution; the raw mixture is kept on the report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import TextEncoderStub, encode_text
from .model import (
    PromptBank,
    PromptNetParams,
    class_scores,
    prompt_net_forward,
    softmax_probs,
)

AGGREGATORS = ("domain_guided", "average", "uncertainty")
_ENTROPY_EPS = 1e-6


@dataclass
class InferenceModel:
    """Frozen bundle of everything prediction needs."""

    group_nets: dict[int, PromptNetParams]
    bank: PromptBank
    stub: TextEncoderStub
    tau: float = 0.07
    tau_w: float = 0.07
    # Class-agnostic token block [L_tok x token_dim] used when scoring an
    # image against domain prompts; conventionally the mean class token
    # block of the training store.
    neutral_tokens: np.ndarray | None = None
    # When set, the global path gets exactly this weight and the domain
    # weights are renormalized to share 1 - fixed_global_weight.
    fixed_global_weight: float | None = None

    @property
    def num_domains(self) -> int:
        return len(self.bank.domain_prompts)

    def validate(self) -> None:
        if self.tau <= 0 or self.tau_w <= 0:
            raise ValueError("temperatures must be positive")
        if sorted(self.group_nets) != list(range(self.num_domains)):
            raise ValueError("group_nets keys must match bank domain indices")
        if self.fixed_global_weight is not None and not 0.0 <= self.fixed_global_weight <= 1.0:
            raise ValueError("fixed_global_weight must be in [0, 1]")


def make_inference_model(
    group_nets: dict[int, PromptNetParams],
    bank: PromptBank,
    stub: TextEncoderStub,
    class_token_embeddings: np.ndarray,
    tau: float = 0.07,
    tau_w: float = 0.07,
    fixed_global_weight: float | None = None,
) -> InferenceModel:
    """Assemble a model, deriving the neutral token block from a token set."""
    model = InferenceModel(
        group_nets=group_nets,
        bank=bank,
        stub=stub,
        tau=tau,
        tau_w=tau_w,
        neutral_tokens=np.asarray(class_token_embeddings, dtype=np.float64).mean(axis=0),
        fixed_global_weight=fixed_global_weight,
    )
    model.validate()
    return model


@dataclass
class PredictionReport:
    """One sample's outcome: class distribution, path weights, argmax."""

    probs: np.ndarray          # [n]
    domain_weights: np.ndarray  # [M + 1], (w_1..w_M, w_g)
    predicted: int
    mixed_scores: np.ndarray | None = None  # [n] pre-softmax mixture


def _check_tokens(model: InferenceModel, class_tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(class_tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[0] < 1:
        raise ValueError(f"class_tokens must be [n, L_tok, token_dim], got {tokens.shape}")
    if tokens.shape[2] != model.stub.token_dim:
        raise ValueError(
            f"class token width {tokens.shape[2]} != stub token_dim {model.stub.token_dim}"
        )
    return tokens


def build_text_features(
    model: InferenceModel, class_tokens: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-domain and global text feature matrices for the given classes.

    The prompt networks consume the full token stack of exactly these
    classes, so unseen classes work by construction: their tokens simply
    become new keys/values and new suffixes.
    """
    tokens = _check_tokens(model, class_tokens)
    n = tokens.shape[0]
    flat = tokens.reshape(-1, tokens.shape[-1])
    per_domain: list[np.ndarray] = []
    for d in sorted(model.group_nets):
        prompt = prompt_net_forward(model.group_nets[d], flat)
        feats = np.empty((n, model.stub.dim))
        for j in range(n):
            feats[j] = encode_text(model.stub, prompt, tokens[j])
        per_domain.append(feats)
    global_feats = np.empty((n, model.stub.dim))
    for j in range(n):
        global_feats[j] = encode_text(model.stub, model.bank.global_prompt, tokens[j])
    return per_domain, global_feats


def _weight_anchors(model: InferenceModel) -> np.ndarray:
    """Encoded domain prompts plus global prompt, each over the neutral block."""
    if model.neutral_tokens is None:
        raise ValueError("model has no neutral token block; build it via make_inference_model")
    anchors = np.empty((model.num_domains + 1, model.stub.dim))
    for d in range(model.num_domains):
        anchors[d] = encode_text(model.stub, model.bank.domain_prompts[d], model.neutral_tokens)
    anchors[-1] = encode_text(model.stub, model.bank.global_prompt, model.neutral_tokens)
    return anchors


def _fix_global(model: InferenceModel, weights: np.ndarray) -> np.ndarray:
    if model.fixed_global_weight is None:
        return weights
    w_g = model.fixed_global_weight
    domain_part = weights[:-1]
    out = np.empty_like(weights)
    out[:-1] = domain_part / domain_part.sum() * (1.0 - w_g)
    out[-1] = w_g
    return out


def domain_weights(model: InferenceModel, image_emb: np.ndarray) -> np.ndarray:
    """Softmax over the image's similarity to each prompt path.

    Returns [M + 1] weights ordered (w_1..w_M, w_g); sums to 1.
    """
    scores = class_scores(image_emb, _weight_anchors(model))
    return _fix_global(model, softmax_probs(scores, model.tau_w))


def _path_scores(
    model: InferenceModel, image_emb: np.ndarray, class_tokens: np.ndarray
) -> np.ndarray:
    per_domain, global_feats = build_text_features(model, class_tokens)
    return np.stack([class_scores(image_emb, f) for f in per_domain + [global_feats]])


def _report(model: InferenceModel, scores: np.ndarray, weights: np.ndarray) -> PredictionReport:
    mixed = weights @ scores
    probs = softmax_probs(mixed, model.tau)
    return PredictionReport(
        probs=probs,
        domain_weights=weights,
        predicted=int(np.argmax(probs)),
        mixed_scores=mixed,
    )


def predict_domain_guided(
    model: InferenceModel, image_emb: np.ndarray, class_tokens: np.ndarray
) -> PredictionReport:
    """Mixture of path scores under similarity-derived domain weights."""
    scores = _path_scores(model, image_emb, class_tokens)
    return _report(model, scores, domain_weights(model, image_emb))


def predict_average(
    model: InferenceModel, image_emb: np.ndarray, class_tokens: np.ndarray
) -> PredictionReport:
    scores = _path_scores(model, image_emb, class_tokens)
    paths = scores.shape[0]
    return _report(model, scores, np.full(paths, 1.0 / paths))


def _inverse_entropy_weights(path_probs: np.ndarray) -> np.ndarray:
    # path_probs: [paths, n] rows of class distributions.
    entropy = -(path_probs * np.log(path_probs)).sum(axis=-1)
    inv = 1.0 / (entropy + _ENTROPY_EPS)
    return inv / inv.sum(axis=-1, keepdims=True)


def predict_uncertainty(
    model: InferenceModel, image_emb: np.ndarray, class_tokens: np.ndarray
) -> PredictionReport:
    scores = _path_scores(model, image_emb, class_tokens)
    path_probs = np.stack([softmax_probs(s, model.tau) for s in scores])
    return _report(model, scores, _inverse_entropy_weights(path_probs))


_PREDICTORS = {
    "domain_guided": predict_domain_guided,
    "average": predict_average,
    "uncertainty": predict_uncertainty,
}


def predict(
    model: InferenceModel, image_emb: np.ndarray, class_tokens: np.ndarray, aggregator: str
) -> PredictionReport:
    if aggregator not in _PREDICTORS:
        raise ValueError(f"unknown aggregator {aggregator!r}, expected one of {AGGREGATORS}")
    return _PREDICTORS[aggregator](model, image_emb, class_tokens)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def evaluate(
    model: InferenceModel,
    store,
    aggregator: str,
    target_classes=None,
) -> dict:
    """Accuracy per evaluation domain plus macro average.

    target_classes restricts both the label set and the candidate set to
    the given store class indices (evaluation rows with other labels are
    dropped); None evaluates over all store classes. All images sharing
    one store are scored against one feature build, vectorized.
    """
    if aggregator not in _PREDICTORS:
        raise ValueError(f"unknown aggregator {aggregator!r}, expected one of {AGGREGATORS}")
    if target_classes is None:
        target = np.arange(store.num_classes)
    else:
        target = np.asarray(sorted(set(int(c) for c in target_classes)), dtype=np.int64)
        if target.size == 0 or target[0] < 0 or target[-1] >= store.num_classes:
            raise ValueError("target_classes out of range")

    keep = np.isin(store.image_class, target)
    if not keep.any():
        raise ValueError("no evaluation images carry a target class")
    x = store.image_embeddings[keep].astype(np.float64)
    label_pos = {int(c): i for i, c in enumerate(target)}
    labels = np.array([label_pos[int(c)] for c in store.image_class[keep]])
    domains_of = store.image_domain[keep]

    tokens = store.class_token_embeddings[target].astype(np.float64)
    per_domain, global_feats = build_text_features(model, tokens)
    paths = per_domain + [global_feats]
    scores = np.stack([x @ f.T for f in paths], axis=1)      # [N, paths, n]

    n_paths = len(paths)
    if aggregator == "average":
        weights = np.full((x.shape[0], n_paths), 1.0 / n_paths)
    elif aggregator == "uncertainty":
        path_probs = _softmax_rows(scores / model.tau)
        weights = _inverse_entropy_weights(path_probs)
    else:
        anchor_scores = x @ _weight_anchors(model).T          # [N, paths]
        weights = _softmax_rows(anchor_scores / model.tau_w)
        if model.fixed_global_weight is not None:
            weights = np.stack([_fix_global(model, w) for w in weights])

    mixed = (weights[:, :, None] * scores).sum(axis=1)        # [N, n]
    predicted = mixed.argmax(axis=1)
    correct = predicted == labels

    per_domain_acc: dict[str, float] = {}
    for d in range(store.num_domains):
        mask = domains_of == d
        if mask.any():
            per_domain_acc[store.domains[d]] = float(correct[mask].mean())
    return {
        "aggregator": aggregator,
        "per_domain": per_domain_acc,
        "average": float(np.mean(list(per_domain_acc.values()))),
        "n_samples": int(x.shape[0]),
    }


def format_results_table(results: dict) -> str:
    """Fixed-width text table: one column per domain plus the macro average."""
    names = list(results["per_domain"]) + ["Average"]
    values = [results["per_domain"][n] for n in results["per_domain"]] + [results["average"]]
    width = max(9, *(len(n) + 2 for n in names))
    header = "".join(n.rjust(width) for n in names)
    row = "".join(f"{v * 100:.2f}".rjust(width) for v in values)
    title = f"aggregator: {results['aggregator']}  (n={results['n_samples']})"
    return "\n".join([title, header, row])
