"""Whole-pipeline gradient verification and router utilization statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from gazemoe import tensor as T
from gazemoe.config import RunConfig
from gazemoe.data import GazeSplit, make_dataset
from gazemoe.errors import ContractError
from gazemoe.gradcheck import analytic_gradients, numeric_gradient, relative_errors
from gazemoe.losses import angular_loss, total_loss
from gazemoe.model import GazeModel, build_model
from gazemoe.prototypes import CONTEXTS
from gazemoe.transformer import MoEFFN, load_balance_loss

MAX_GRADCHECK_PARAMS = 1000
GRADCHECK_TOLERANCE = 1e-3
# Hard prototype selection and top-K routing make the loss piecewise smooth;
# a 1e-3 step regularly straddles a selection boundary of the tiny model.
GRADCHECK_STEP = 1e-5
GRADCHECK_BATCH = 4


@dataclass
class GradcheckReport:
    parameters: int
    group_errors: Dict[str, float]
    sparsity_ok: Optional[bool]  # None when prototypes are soft
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def failing_groups(self) -> List[str]:
        return [g for g, e in self.group_errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing_groups and self.sparsity_ok is not False


def run_gradcheck(cfg: RunConfig, step: float = GRADCHECK_STEP, batch: int = GRADCHECK_BATCH,
                  corrupt_group: Optional[str] = None) -> GradcheckReport:
    """Central differences over every trainable parameter of the full pipeline, in float64.

    ``corrupt_group`` perturbs the backprop gradients of one group before the
    comparison; it exists to show the check can fail.
    """
    with T.default_dtype(np.float64):
        model = build_model(cfg)
        n_params = model.num_parameters()
        if n_params > MAX_GRADCHECK_PARAMS:
            raise ContractError(f"gradcheck needs <= {MAX_GRADCHECK_PARAMS} parameters, this config has "
                                f"{n_params}; use --profile tiny or shrink the model")
        train, _, _ = make_dataset(cfg.data.n, cfg.data_seed, cfg.data.image_size)
        images = train.images[:batch].astype(np.float64)
        gaze = train.gaze[:batch]
        frozen = model.encoders.frozen_features(images)
        coeff = cfg.model.load_balance_coeff

        def loss():
            out = model(images, frozen)
            ang = angular_loss(out.prediction, gaze)
            return total_loss(ang, load_balance_loss(out.decisions), coeff) if out.decisions else ang

        groups = model.parameter_groups()
        if corrupt_group is not None and corrupt_group not in groups:
            raise ContractError(f"unknown parameter group {corrupt_group!r}; groups: {sorted(groups)}")
        names = [(g, n) for g, members in groups.items() for n in members]
        tensors = [groups[g][n] for g, n in names]
        analytic = analytic_gradients(loss, tensors)
        report = {g: 0.0 for g in groups}
        for (group, _), p, a in zip(names, tensors, analytic):
            if group == corrupt_group:
                a = a * 1.5 + 1e-3
            err = float(relative_errors(a, numeric_gradient(loss, p, step)).max(initial=0.0))
            report[group] = max(report[group], err)

        sparsity = None
        if cfg.model.prototype_mode == "hard":
            sparsity = _selected_rows_only(model, images[:1], (frozen[0][:1], frozen[1][:1]), gaze[:1])
    return GradcheckReport(n_params, report, sparsity)


def _selected_rows_only(model: GazeModel, image, frozen, gaze) -> bool:
    """Single-sample backward: prototype rows other than the selected one get no gradient."""
    model.zero_grad()
    out = model(image, frozen)
    angular_loss(out.prediction, gaze).backward()
    for c in CONTEXTS:
        grad = model.prototypes.prototypes(c).grad
        if grad is None:
            continue
        touched = set(np.flatnonzero(np.any(grad != 0, axis=1)).tolist())
        if not touched <= {int(out.chosen[c][0])}:
            return False
    return model.prototypes.log_tau.grad is None or not np.any(model.prototypes.log_tau.grad)


def format_gradcheck(report: GradcheckReport) -> str:
    lines = [f"parameters: {report.parameters}"]
    for group, err in report.group_errors.items():
        lines.append(f"{group:<20} max_rel_err {err:.3e}  {'ok' if err < report.tolerance else 'FAIL'}")
    if report.sparsity_ok is not None:
        lines.append(f"{'hard_selection':<20} selected-row-only gradient  {'ok' if report.sparsity_ok else 'FAIL'}")
    lines.append("PASS" if report.passed else "FAIL: " + ", ".join(report.failing_groups or ["hard_selection"]))
    return "\n".join(lines)


# -- routing statistics ---------------------------------------------------------------


@dataclass
class LayerRouteStats:
    layer: int
    load_fraction: np.ndarray  # (E,), sums to 1
    mean_prob: np.ndarray  # (E,)
    tokens: int
    max_active: int = 0

    @property
    def entropy(self) -> float:
        p = self.load_fraction[self.load_fraction > 0]
        return float(-(p * np.log(p)).sum())


@dataclass
class RouteStats:
    layers: List[LayerRouteStats] = field(default_factory=list)

    def rows(self) -> List[tuple]:
        return [(s.layer, e, float(s.load_fraction[e]), float(s.mean_prob[e]), s.entropy)
                for s in self.layers for e in range(len(s.load_fraction))]


def route_stats(model: GazeModel, split: GazeSplit, frozen=None, batch_size: int = 200) -> RouteStats:
    """Per-layer expert load fractions, mean router probabilities and load entropy over a split."""
    moe_layers = [i for i, f in enumerate(model.encoder.ffn) if isinstance(f, MoEFFN)]
    if not moe_layers:
        raise ContractError("this model has no MoE layers (trained with train.moe_enabled = false or "
                            "model.layers = 0), so there is no router to report on")
    if len(split) == 0:
        raise ContractError("route statistics need a non-empty split")
    counts = {i: 0.0 for i in moe_layers}
    probs = {i: 0.0 for i in moe_layers}
    tokens = {i: 0 for i in moe_layers}
    max_active = {i: 0 for i in moe_layers}
    with T.no_grad():
        for start in range(0, len(split), batch_size):
            sl = slice(start, start + batch_size)
            fz = None if frozen is None else (frozen[0][sl], frozen[1][sl])
            out = model(split.images[sl], fz)
            for layer, dec in zip(moe_layers, out.decisions):
                n = dec.probs.shape[0]
                counts[layer] = counts[layer] + np.bincount(dec.topk_indices.reshape(-1),
                                                            minlength=dec.num_experts)
                probs[layer] = probs[layer] + dec.probs.data.astype(np.float64).sum(axis=0)
                tokens[layer] += n
                max_active[layer] = max(max_active[layer], int(dec.active_per_token.max(initial=0)))
    layers = []
    for i in moe_layers:
        load = counts[i] / counts[i].sum()
        layers.append(LayerRouteStats(i, load, probs[i] / tokens[i], tokens[i], max_active[i]))
    return RouteStats(layers)


def format_route_stats(stats: RouteStats) -> str:
    lines = ["layer\texpert\tload_fraction\tmean_prob\tload_entropy"]
    for layer, expert, load, prob, ent in stats.rows():
        lines.append(f"{layer}\t{expert}\t{load:.6f}\t{prob:.6f}\t{ent:.6f}")
    for s in stats.layers:
        lines.append(f"# layer {s.layer}: entropy {s.entropy:.4f} of max {math.log(len(s.load_fraction)):.4f}, "
                     f"{s.tokens} tokens, at most {s.max_active} routed experts per token")
    return "\n".join(lines)
