"""Learnable context prototype banks and global-feature conditioning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from gazemoe import tensor as T
from gazemoe.errors import ContractError
from gazemoe.nn import LayerNorm, Module, param
from gazemoe.tensor import Tensor

CONTEXTS = ("illum", "head", "bg", "label")
SCENE_CONTEXTS = ("illum", "head", "bg")
DEFAULT_COUNTS = {"illum": 4, "head": 4, "bg": 4, "label": 8}


class PrototypeBank(Module):
    """One K_c x d prototype matrix per context and a shared temperature.

    The temperature is stored as its logarithm so it stays positive under any
    optimizer update.
    """

    def __init__(self, dim: int, rng: np.random.Generator, counts: Optional[Mapping[str, int]] = None,
                 temperature: float = 10.0, init_std: float = 0.02):
        counts = dict(DEFAULT_COUNTS if counts is None else counts)
        if set(counts) != set(CONTEXTS):
            raise ContractError(f"prototype counts must cover exactly {CONTEXTS}, got {sorted(counts)}")
        if temperature <= 0:
            raise ContractError("temperature must be positive")
        self.dim = dim
        for c in CONTEXTS:
            setattr(self, c, param(rng.normal(0.0, init_std, size=(counts[c], dim))))
        self.log_tau = param(np.array(math.log(temperature)))

    def prototypes(self, context: str) -> Tensor:
        if context not in CONTEXTS:
            raise ContractError(f"unknown context {context!r}")
        return getattr(self, context)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()


@dataclass
class ContextSelection:
    scores: Dict[str, Tensor]  # context -> (B, K_c) probabilities
    chosen: Dict[str, np.ndarray]  # context -> (B,) argmax indices


def _as_batch(f_global: Tensor) -> Tuple[Tensor, bool]:
    f_global = T.as_tensor(f_global)
    if f_global.ndim == 1:
        return f_global.reshape(1, -1), True
    return f_global, False


def context_scores(bank: PrototypeBank, f_global: Tensor) -> ContextSelection:
    """Temperature-scaled cosine-similarity softmax over each bank, plus its argmax.

    Ties resolve to the lowest index. Raises DegenerateInputError for a zero
    global vector.
    """
    batch, single = _as_batch(f_global)
    f_hat = T.l2_normalize(batch, axis=-1)
    tau = bank.tau
    scores, chosen = {}, {}
    for c in CONTEXTS:
        p_hat = T.l2_normalize(bank.prototypes(c), axis=-1)
        s = T.softmax(T.matmul(f_hat, p_hat.T) * tau, axis=-1)
        scores[c] = s.reshape(-1) if single else s
        idx = np.argmax(s.data, axis=-1)
        chosen[c] = idx[0:1] if single else idx
    return ContextSelection(scores, chosen)


def _norm(x: Tensor, layer: Optional[LayerNorm]) -> Tensor:
    return layer(x) if layer is not None else T.layer_norm(x)


def condition_global(bank: PrototypeBank, f_global: Tensor, selection: ContextSelection,
                     norm1: Optional[LayerNorm] = None, norm2: Optional[LayerNorm] = None) -> Tuple[Tensor, Tensor]:
    """Hard conditioning: add the chosen prototype rows and layer-normalize.

    The chosen indices are constants, so only the selected rows (and
    ``f_global``) receive gradient; the temperature receives none.
    """
    batch, single = _as_batch(f_global)
    rows = {}
    for c in CONTEXTS:
        idx = np.asarray(selection.chosen[c]).reshape(-1)
        k = bank.prototypes(c).shape[0]
        if idx.shape[0] != batch.shape[0] or np.any(idx < 0) or np.any(idx >= k):
            raise ContractError(f"invalid selection for context {c!r}: {idx} (bank has {k} rows)")
        rows[c] = bank.prototypes(c)[idx]
    scene = batch + rows["illum"] + rows["head"] + rows["bg"]
    f1 = _norm(scene, norm1)
    f2 = _norm(batch + rows["label"], norm2)
    if single:
        return f1.reshape(-1), f2.reshape(-1)
    return f1, f2


def soft_condition_global(bank: PrototypeBank, f_global: Tensor, norm1: Optional[LayerNorm] = None,
                          norm2: Optional[LayerNorm] = None,
                          selection: Optional[ContextSelection] = None) -> Tuple[Tensor, Tensor]:
    """Soft variant: each context contributes its score-weighted prototype mixture."""
    batch, single = _as_batch(f_global)
    selection = selection or context_scores(bank, batch)
    mix = {c: T.matmul(selection.scores[c].reshape(batch.shape[0], -1), bank.prototypes(c)) for c in CONTEXTS}
    f1 = _norm(batch + mix["illum"] + mix["head"] + mix["bg"], norm1)
    f2 = _norm(batch + mix["label"], norm2)
    if single:
        return f1.reshape(-1), f2.reshape(-1)
    return f1, f2
