"""End-to-end gaze model: encoders, prototype conditioning, fused MoE Transformer, head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from gazemoe import tensor as T
from gazemoe.config import FAMILIES, ModelConfig, RunConfig
from gazemoe.encoders import EncoderSuite
from gazemoe.errors import ContractError
from gazemoe.losses import pool_and_predict
from gazemoe.nn import LayerNorm, Linear, Module
from gazemoe.prototypes import PrototypeBank, condition_global, context_scores, soft_condition_global
from gazemoe.tensor import Tensor
from gazemoe.transformer import RouterDecision, TokenFusion, TransformerEncoder


@dataclass
class ForwardResult:
    prediction: Tensor  # (B, 3), unnormalized
    decisions: List[RouterDecision]
    chosen: Dict[str, np.ndarray]  # context -> (B,) selected prototype rows
    type_tags: tuple


class GazeModel(Module):
    def __init__(self, cfg: ModelConfig, image_size: int, rng: np.random.Generator,
                 feature_combo: Sequence[str] = FAMILIES, moe_enabled: bool = True):
        if not feature_combo or not set(feature_combo) <= set(FAMILIES):
            raise ContractError(f"feature_combo must be a non-empty subset of {FAMILIES}, got {feature_combo}")
        self.cfg = cfg
        self.feature_combo = tuple(f for f in FAMILIES if f in feature_combo)
        self.moe_enabled = moe_enabled
        self.encoders = EncoderSuite(image_size, cfg.patch_size, cfg.feature_dim, cfg.cnn_channels,
                                     cfg.cnn_grid, cfg.encoder_seed, rng)
        self.prototypes = PrototypeBank(cfg.feature_dim, rng, cfg.prototype_counts(), cfg.temperature_init,
                                        cfg.prototype_init_std)
        self.f1_norm = LayerNorm(cfg.feature_dim)
        self.f2_norm = LayerNorm(cfg.feature_dim)
        self.fusion = TokenFusion(cfg.feature_dim, cfg.cnn_channels, cfg.d_model, self.encoders.num_cnn_tokens,
                                  rng, cfg.cnn_positional)
        dense_hidden = cfg.expert_ffn_dim * (cfg.routed_experts + cfg.shared_experts) if cfg.dense_param_matched else None
        self.encoder = TransformerEncoder(cfg.d_model, cfg.layers, cfg.heads, cfg.expert_ffn_dim,
                                          cfg.routed_experts, cfg.top_k, cfg.shared_experts, rng,
                                          moe_layers=cfg.moe_layers, moe_enabled=moe_enabled,
                                          dense_hidden=dense_hidden)
        self.head = Linear(cfg.d_model, 3, rng)

    @property
    def has_moe(self) -> bool:
        return self.encoder.has_moe

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        """Trainable parameters grouped by architectural role."""
        groups: Dict[str, Dict[str, Tensor]] = {k: {} for k in (
            "cnn", "prototypes", "conditioning_norms", "projections", "attention",
            "router", "routed_experts", "shared_experts", "dense_ffn", "ffn_norms", "final_norm", "head")}
        ffn_groups = {"norm": "ffn_norms", "router": "router", "experts": "routed_experts",
                      "shared": "shared_experts", "ffn": "dense_ffn"}
        for name, p in self.named_parameters():
            parts = name.split(".")
            if parts[0] == "encoders":
                g = "cnn"
            elif parts[0] in ("f1_norm", "f2_norm"):
                g = "conditioning_norms"
            elif parts[0] == "fusion":
                g = "projections"
            elif parts[0] == "encoder":
                if parts[1] == "attn":
                    g = "attention"
                elif parts[1] == "final_norm":
                    g = "final_norm"
                else:
                    g = ffn_groups[parts[3]]
            else:
                g = parts[0]
            groups[g][name] = p
        return {k: v for k, v in groups.items() if v}

    def forward(self, images: np.ndarray, frozen: Optional[tuple] = None) -> ForwardResult:
        """Run the full pipeline on a batch of (B, H, W, 3) images.

        ``frozen`` optionally supplies precomputed (f_global, T_patch) arrays
        from ``encoders.frozen_features`` for the same images.
        """
        f_global_np, t_patch_np = frozen if frozen is not None else self.encoders.frozen_features(images)
        dtype = self.head.weight.dtype
        f_global = Tensor(np.asarray(f_global_np, dtype=dtype))
        combo = self.feature_combo

        soft = self.cfg.prototype_mode == "soft"
        if soft:
            selection = context_scores(self.prototypes, f_global)
            f1, f2 = soft_condition_global(self.prototypes, f_global, self.f1_norm, self.f2_norm, selection)
        else:
            with T.no_grad():
                selection = context_scores(self.prototypes, f_global)
            f1, f2 = condition_global(self.prototypes, f_global, selection, self.f1_norm, self.f2_norm)

        t_patch = Tensor(np.asarray(t_patch_np, dtype=dtype)) if "PATCH" in combo else None
        t_cnn = self.encoders.cnn_tokens(images) if "CNN" in combo else None
        seq = self.fusion(f1 if "F1" in combo else None, f2 if "F2" in combo else None, t_patch, t_cnn)
        y, decisions = self.encoder(seq.tokens)
        pred = pool_and_predict(y, self.head)
        return ForwardResult(pred, decisions, selection.chosen, seq.type_tags)

    __call__ = forward


def build_model(cfg: RunConfig, seed: Optional[int] = None) -> GazeModel:
    """Deterministically initialize a model from a run configuration."""
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    return GazeModel(cfg.model, cfg.data.image_size, rng, cfg.train.feature_combo, cfg.train.moe_enabled)
