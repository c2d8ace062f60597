"""Token fusion and the routed+shared Mixture-of-Experts Transformer encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from gazemoe import tensor as T
from gazemoe.config import FAMILIES
from gazemoe.errors import ContractError, DimensionError
from gazemoe.nn import FeedForward, LayerNorm, Linear, Module, param
from gazemoe.tensor import Tensor


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, L, d_model)
    type_tags: Tuple[str, ...]  # family of each of the L positions

    def __len__(self) -> int:
        return self.tokens.shape[1]


class TokenFusion(Module):
    """Per-family linear projection into d_model plus a learned type embedding."""

    def __init__(self, feature_dim: int, cnn_channels: int, d_model: int, num_cnn_tokens: int,
                 rng: np.random.Generator, cnn_positional: bool = False):
        self.feature_dim = feature_dim
        self.cnn_channels = cnn_channels
        self.proj_f1 = Linear(feature_dim, d_model, rng)
        self.proj_f2 = Linear(feature_dim, d_model, rng)
        self.proj_patch = Linear(feature_dim, d_model, rng)
        self.proj_cnn = Linear(cnn_channels, d_model, rng)
        self.type_embed = param(rng.normal(0.0, 0.02, size=(len(FAMILIES), d_model)))
        self.cnn_pos = param(rng.normal(0.0, 0.02, size=(num_cnn_tokens, d_model))) if cnn_positional else None

    def __call__(self, f1: Optional[Tensor], f2: Optional[Tensor], t_patch: Optional[Tensor],
                 t_cnn: Optional[Tensor]) -> TokenSequence:
        return project_and_fuse(f1, f2, t_patch, t_cnn, self)


def project_and_fuse(f1: Optional[Tensor], f2: Optional[Tensor], t_patch: Optional[Tensor],
                     t_cnn: Optional[Tensor], params: TokenFusion) -> TokenSequence:
    """Build ``[f1; f2; T_patch; T_cnn]`` in d_model space, skipping families passed as ``None``.

    Inputs are batched: f1/f2 ``(B, d)``, T_patch ``(B, N, d)``, T_cnn ``(B, M, C)``.
    """
    pieces, tags = [], []
    inputs = (("F1", f1, params.proj_f1, params.feature_dim), ("F2", f2, params.proj_f2, params.feature_dim),
              ("PATCH", t_patch, params.proj_patch, params.feature_dim),
              ("CNN", t_cnn, params.proj_cnn, params.cnn_channels))
    for family, x, proj, width in inputs:
        if x is None:
            continue
        x = T.as_tensor(x)
        if x.ndim == 2 and family in ("F1", "F2"):
            x = x.reshape(x.shape[0], 1, x.shape[1])
        if x.ndim != 3 or x.shape[-1] != width:
            raise DimensionError(f"{family} tokens must be (B, n, {width}), got {x.shape}")
        tok = proj(x) + params.type_embed[FAMILIES.index(family)]
        if family == "CNN" and params.cnn_pos is not None:
            tok = tok + params.cnn_pos
        pieces.append(tok)
        tags.extend([family] * x.shape[1])
    if not pieces:
        raise ContractError("at least one token family is required")
    batch = {p.shape[0] for p in pieces}
    if len(batch) != 1:
        raise DimensionError(f"token families disagree on batch size: {sorted(batch)}")
    return TokenSequence(T.concat(pieces, axis=1), tuple(tags))


class SelfAttention(Module):
    """Pre-norm bidirectional multi-head self-attention with a residual connection."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise DimensionError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.norm = LayerNorm(d_model)
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng, std=1.0 / math.sqrt(2 * d_model))

    def __call__(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        h, dh = self.heads, d // self.heads
        xn = self.norm(x)

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, s, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(xn)), split(self.k(xn)), split(self.v(xn))
        attn = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return x + self.out(ctx)


def attention_block(x: TokenSequence, params: SelfAttention) -> TokenSequence:
    return TokenSequence(params(x.tokens), x.type_tags)


# -- routing -----------------------------------------------------------------------


@dataclass
class RouterDecision:
    probs: Tensor  # (T, E) softmax over routed experts
    topk_indices: np.ndarray  # (T, K), descending probability, ties to the lowest index
    gate_weights: Tensor  # (T, K), renormalized over the top-K
    batch_load: np.ndarray  # (E,) fraction of (token, slot) assignments per expert; sums to 1
    batch_importance: Tensor  # (E,) mean router probability per expert
    active_per_token: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_experts(self) -> int:
        return self.probs.shape[-1]

    @property
    def top_k(self) -> int:
        return self.topk_indices.shape[-1]


def route_logits(logits: Tensor, k: int) -> RouterDecision:
    """Softmax the router logits and keep the top-``k`` experts per token."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    n_tokens, n_experts = logits.shape
    if not 1 <= k <= n_experts:
        raise ContractError(f"top_k must be in [1, {n_experts}], got {k}")
    if n_tokens == 0:
        raise ContractError("cannot route an empty batch")
    probs = T.softmax(logits, axis=-1)
    # stable sort on -p keeps the lower index first among exact ties
    topk = np.argsort(-probs.data, axis=-1, kind="stable")[:, :k]
    chosen = T.take_along(probs, topk)
    gates = chosen / chosen.sum(axis=-1, keepdims=True)
    load = np.bincount(topk.reshape(-1), minlength=n_experts).astype(np.float64) / (n_tokens * k)
    return RouterDecision(probs, topk, gates, load, probs.mean(axis=0))


def route(x_token: Tensor, router: Linear, k: int) -> RouterDecision:
    return route_logits(router(x_token), k)


def load_balance_loss(decisions: Sequence[RouterDecision]) -> Tensor:
    """Switch-style auxiliary loss ``E * sum_i f_i * P_i`` averaged over MoE layers.

    Equals 1 under perfectly uniform routing and E when everything goes to one
    expert with probability 1. Differentiable through the mean probabilities only.
    """
    if not decisions:
        raise ContractError("load_balance_loss needs at least one executed MoE layer")
    total = None
    for dec in decisions:
        if dec.probs.shape[0] == 0:
            raise ContractError("load_balance_loss on an empty batch")
        f = dec.batch_load.astype(dec.probs.dtype)
        term = (dec.batch_importance * f).sum() * float(dec.num_experts)
        total = term if total is None else total + term
    return total * (1.0 / len(decisions))


# -- feed-forward sublayers ----------------------------------------------------------


class DenseFFN(Module):
    """Pre-norm residual feed-forward sublayer."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, hidden, rng)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Optional[RouterDecision]]:
        return x + self.ffn(self.norm(x)), None


class MoEFFN(Module):
    """Pre-norm residual MoE sublayer: gated top-K routed experts plus always-on shared experts."""

    def __init__(self, d_model: int, hidden: int, routed: int, top_k: int, shared: int,
                 rng: np.random.Generator):
        if not 1 <= top_k <= routed:
            raise ContractError(f"top_k ({top_k}) must be in [1, routed_experts ({routed})]")
        self.top_k = top_k
        self.norm = LayerNorm(d_model)
        self.router = Linear(d_model, routed, rng, bias=False)
        self.experts = [FeedForward(d_model, hidden, rng) for _ in range(routed)]
        self.shared = [FeedForward(d_model, hidden, rng) for _ in range(shared)]

    def __call__(self, x: Tensor) -> Tuple[Tensor, RouterDecision]:
        shape = x.shape
        d = shape[-1]
        h = self.norm(x).reshape(-1, d)
        out, dec = self.mix(h)
        return x + out.reshape(shape), dec

    def mix(self, h: Tensor, routed_scale: float = 1.0) -> Tuple[Tensor, RouterDecision]:
        """Expert mixture for normalized tokens ``h`` of shape (T, d)."""
        n_tokens = h.shape[0]
        dec = route(h, self.router, self.top_k)
        active = np.zeros(n_tokens, dtype=np.int64)
        out = None
        for e, expert in enumerate(self.experts):
            tok, slot = np.nonzero(dec.topk_indices == e)
            if tok.size == 0:
                continue
            active[tok] += 1
            weight = dec.gate_weights[tok, slot].reshape(-1, 1)
            y = expert(h[tok]) * weight
            if routed_scale != 1.0:
                y = y * routed_scale
            contrib = T.scatter_rows(y, tok, n_tokens)
            out = contrib if out is None else out + contrib
        if self.shared:
            shared = None
            for expert in self.shared:
                y = expert(h)
                shared = y if shared is None else shared + y
            shared = shared * (1.0 / len(self.shared))
            out = shared if out is None else out + shared
        dec.active_per_token = active
        return out, dec


def moe_ffn(x: TokenSequence, layer: MoEFFN) -> Tuple[TokenSequence, RouterDecision]:
    y, dec = layer(x.tokens)
    return TokenSequence(y, x.type_tags), dec


class TransformerEncoder(Module):
    """Stack of (attention, FFN-or-MoE) pre-norm blocks with a final LayerNorm."""

    def __init__(self, d_model: int, layers: int, heads: int, expert_ffn_dim: int, routed: int, top_k: int,
                 shared: int, rng: np.random.Generator, moe_layers: Optional[Sequence[int]] = None,
                 moe_enabled: bool = True, dense_hidden: Optional[int] = None):
        moe_set = set(range(layers) if moe_layers is None or len(moe_layers) == 0 else moe_layers)
        self.attn = []
        self.ffn = []
        for i in range(layers):
            self.attn.append(SelfAttention(d_model, heads, rng))
            if moe_enabled and i in moe_set:
                self.ffn.append(MoEFFN(d_model, expert_ffn_dim, routed, top_k, shared, rng))
            else:
                self.ffn.append(DenseFFN(d_model, dense_hidden or expert_ffn_dim, rng))
        self.final_norm = LayerNorm(d_model)

    @property
    def has_moe(self) -> bool:
        return any(isinstance(f, MoEFFN) for f in self.ffn)

    def __call__(self, x: Tensor) -> Tuple[Tensor, List[RouterDecision]]:
        decisions: List[RouterDecision] = []
        for attn, ffn in zip(self.attn, self.ffn):
            x = attn(x)
            x, dec = ffn(x)
            if dec is not None:
                decisions.append(dec)
        return self.final_norm(x), decisions


def forward_encoder(x: TokenSequence, model: TransformerEncoder) -> Tuple[TokenSequence, List[RouterDecision]]:
    y, decisions = model(x.tokens)
    return TokenSequence(y, x.type_tags), decisions
