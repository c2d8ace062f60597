"""Training loop, evaluation, the ridge baseline and the ablation protocols."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gazemoe import tensor as T
from gazemoe.config import FAMILIES, RunConfig
from gazemoe.data import GazeSplit, make_dataset
from gazemoe.errors import ContractError, DegeneratePredictionError, NumericError, TrainingDivergenceError
from gazemoe.losses import angular_error_degrees, angular_loss, total_loss
from gazemoe.model import ForwardResult, GazeModel, build_model
from gazemoe.optim import AdamW, clip_grad_norm, cosine_lr
from gazemoe.transformer import load_balance_loss

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "epoch", "lr", "train_angular", "load_balance", "val_error_deg",
                   "test_error_deg", "load_entropy")

EVAL_BATCH = 200


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    train_angular: float
    load_balance: float
    val_error_deg: float
    test_error_deg: float
    load_entropy: float

    def row(self) -> List[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in asdict(self).values()]


@dataclass
class Splits:
    """Dataset splits plus their cached frozen-encoder features."""

    train: GazeSplit
    val: GazeSplit
    test: GazeSplit
    frozen: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def get(self, name: str) -> GazeSplit:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass
class TrainResult:
    model: GazeModel
    optimizer: AdamW
    records: List[MetricsRecord]
    steps: int

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def load_splits(cfg: RunConfig) -> Splits:
    train, val, test = make_dataset(cfg.data.n, cfg.data_seed, cfg.data.image_size)
    return Splits(train, val, test)


def _frozen(model: GazeModel, splits: Splits, name: str):
    # features from the frozen encoders never change, so compute them once per split
    key = (name, model.cfg.encoder_seed, model.cfg.patch_size, model.cfg.feature_dim,
           model.encoders.patch_map.dtype.str)
    if key not in splits.frozen:
        splits.frozen[key] = model.encoders.frozen_features(splits.get(name).images)
    return splits.frozen[key]


def predict(model: GazeModel, images: np.ndarray, frozen=None, batch_size: int = EVAL_BATCH) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            fz = None if frozen is None else (frozen[0][sl], frozen[1][sl])
            out.append(model(images[sl], fz).prediction.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 3))


def evaluate(model: GazeModel, split: GazeSplit, frozen=None) -> float:
    """Mean per-sample angular error in degrees over ``split``."""
    if len(split) == 0:
        raise ContractError("cannot evaluate on an empty split")
    pred = predict(model, split.images, frozen)
    return float(np.mean(angular_error_degrees(pred, split.gaze)))


def load_entropy(load: np.ndarray) -> float:
    p = load[load > 0]
    return float(-(p * np.log(p)).sum())


def train(cfg: RunConfig, splits: Optional[Splits] = None, model: Optional[GazeModel] = None,
          metrics_path: Optional[Path] = None,
          on_step: Optional[Callable[[int, ForwardResult], None]] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """Seeded AdamW training with per-step cosine annealing and per-epoch evaluation.

    Writes one metrics row per epoch to ``metrics_path`` if given. ``max_steps``
    truncates the run (the schedule still spans the full configured length).
    """
    t_cfg = cfg.train
    splits = splits or load_splits(cfg)
    model = model or build_model(cfg)
    params = list(model.named_parameters())
    opt = AdamW(params, t_cfg.weight_decay, (t_cfg.beta1, t_cfg.beta2), t_cfg.adam_eps)
    lb_coeff = cfg.model.load_balance_coeff
    shuffle_rng = np.random.default_rng([cfg.seed, 2])

    n = len(splits.train)
    if n == 0:
        raise ContractError("training split is empty")
    per_epoch = math.ceil(n / t_cfg.batch_size)
    total_steps = t_cfg.epochs * per_epoch
    train_fz = _frozen(model, splits, "train")
    val_fz = _frozen(model, splits, "val") if len(splits.val) else None
    test_fz = _frozen(model, splits, "test") if len(splits.test) else None

    writer = None
    fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)

    records: List[MetricsRecord] = []
    step = 0
    try:
        for epoch in range(t_cfg.epochs):
            order = shuffle_rng.permutation(n)
            ang_sum = lb_sum = ent_sum = 0.0
            batches = 0
            lr = t_cfg.lr_max
            for start in range(0, n, t_cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                idx = np.sort(order[start:start + t_cfg.batch_size])
                lr = cosine_lr(step, total_steps, t_cfg.lr_max, t_cfg.lr_min)
                opt.zero_grad()
                try:
                    result = model(splits.train.images[idx], (train_fz[0][idx], train_fz[1][idx]))
                    ang = angular_loss(result.prediction, splits.train.gaze[idx])
                except (DegeneratePredictionError, NumericError) as exc:
                    raise TrainingDivergenceError(f"step {step}: {exc}") from exc
                if result.decisions:
                    lb = load_balance_loss(result.decisions)
                    loss = total_loss(ang, lb, lb_coeff)
                    lb_val = lb.item()
                    ent_sum += float(np.mean([load_entropy(d.batch_load) for d in result.decisions]))
                else:
                    loss, lb_val = ang, 0.0
                if not math.isfinite(loss.item()):
                    raise TrainingDivergenceError(f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3g})")
                loss.backward()
                if t_cfg.grad_clip > 0:
                    clip_grad_norm([p for _, p in params], t_cfg.grad_clip)
                opt.step(lr)
                if on_step is not None:
                    on_step(step, result)
                ang_sum += ang.item()
                lb_sum += lb_val
                batches += 1
                step += 1
            if batches == 0:
                break
            record = MetricsRecord(
                step=step, epoch=epoch + 1, lr=float(lr),
                train_angular=ang_sum / batches, load_balance=lb_sum / batches,
                val_error_deg=evaluate(model, splits.val, val_fz) if val_fz is not None else 0.0,
                test_error_deg=evaluate(model, splits.test, test_fz) if test_fz is not None else 0.0,
                load_entropy=ent_sum / batches,
            )
            records.append(record)
            logger.info("epoch %d step %d lr %.3g train %.4f val %.2f test %.2f", record.epoch, step, lr,
                        record.train_angular, record.val_error_deg, record.test_error_deg)
            if writer is not None:
                writer.writerow(record.row())
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, opt, records, step)


# -- linear baseline ----------------------------------------------------------------

RIDGE_ALPHAS = tuple(10.0 ** np.arange(-6, 4, 0.5))


def ridge_baseline(train: GazeSplit, val: GazeSplit, test: GazeSplit,
                   alphas: Sequence[float] = RIDGE_ALPHAS) -> Tuple[float, float]:
    """Ridge regression from raw pixels to gaze; alpha picked on the validation split.

    Returns (test mean angular error in degrees, chosen alpha).
    """
    def flat(split):
        return split.images.reshape(len(split), -1).astype(np.float64)

    x_tr, x_va, x_te = flat(train), flat(val), flat(test)
    mu = x_tr.mean(axis=0)
    y_mu = train.gaze.astype(np.float64).mean(axis=0)
    xc = x_tr - mu
    yc = train.gaze.astype(np.float64) - y_mu
    # dual form: n_train < n_pixels at desk scale
    gram = xc @ xc.T
    best = (math.inf, None, None)
    for alpha in alphas:
        coef = xc.T @ np.linalg.solve(gram + alpha * np.eye(len(gram)), yc)
        err = float(np.mean(angular_error_degrees((x_va - mu) @ coef + y_mu, val.gaze)))
        if err < best[0]:
            best = (err, alpha, coef)
    _, alpha, coef = best
    test_err = float(np.mean(angular_error_degrees((x_te - mu) @ coef + y_mu, test.gaze)))
    return test_err, float(alpha)


# -- ablations --------------------------------------------------------------------

FEATURE_COMBOS = (
    ("f1", ["F1"]),
    ("f1+f2", ["F1", "F2"]),
    ("f1+f2+T_cnn", ["F1", "F2", "CNN"]),
    ("f1+f2+T_cnn+T_patch", list(FAMILIES)),
)
LR_SWEEP = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
ABLATION_AXES = ("features", "moe", "lr")


def ablation_settings(axis: str, base: RunConfig) -> List[Tuple[str, RunConfig]]:
    """The (label, config) pairs of one ablation table."""
    out = []
    if axis == "features":
        for label, combo in FEATURE_COMBOS:
            cfg = copy.deepcopy(base)
            cfg.train.feature_combo = list(combo)
            out.append((label, cfg))
    elif axis == "moe":
        for label, enabled in (("+", True), ("w/o", False)):
            cfg = copy.deepcopy(base)
            cfg.train.moe_enabled = enabled
            out.append((label, cfg))
    elif axis == "lr":
        for lr in LR_SWEEP:
            cfg = copy.deepcopy(base)
            cfg.train.lr_max = lr
            cfg.train.lr_min = min(base.train.lr_min, lr)
            out.append((f"{lr:.0e}", cfg))
    else:
        raise ContractError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    return out


@dataclass
class AblationRow:
    axis: str
    setting: str
    seeds: List[int]
    errors: List[float]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))


def run_ablation(axis: str, base: RunConfig, seeds: Sequence[int] = (0, 1, 2),
                 runner: Optional[Callable[[RunConfig], float]] = None) -> List[AblationRow]:
    """Train every setting of ``axis`` once per seed; one row per setting.

    ``runner`` maps a fully seeded config to a final test error and defaults
    to a fresh ``train`` call.
    """
    runner = runner or (lambda cfg: train(cfg).final.test_error_deg)
    rows = []
    for label, cfg in ablation_settings(axis, base):
        errors = []
        for seed in seeds:
            seeded = copy.deepcopy(cfg)
            seeded.seed = seed
            errors.append(runner(seeded))
        rows.append(AblationRow(axis, label, list(seeds), errors))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    """Render rows as a tab-separated table: setting, mean error, per-seed errors."""
    buf = io.StringIO()
    header = ["setting", "mean_test_error_deg"] + [f"seed_{s}" for s in rows[0].seeds] if rows else []
    buf.write("\t".join(header) + "\n")
    for r in rows:
        buf.write("\t".join([r.setting, f"{r.mean_error:.2f}"] + [f"{e:.2f}" for e in r.errors]) + "\n")
    return buf.getvalue()


def summary(cfg: RunConfig, result: TrainResult, elapsed: float) -> Dict:
    final = result.final
    return {
        "steps": result.steps,
        "epochs": final.epoch,
        "final_val_error_deg": final.val_error_deg,
        "final_test_error_deg": final.test_error_deg,
        "final_train_angular": final.train_angular,
        "parameters": result.model.num_parameters(),
        "seed": cfg.seed,
        "elapsed_seconds": round(elapsed, 3),
        "config": cfg.to_flat(),
    }


def write_summary(path: Path, payload: Dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def timed_train(cfg: RunConfig, **kwargs) -> Tuple[TrainResult, float]:
    start = time.perf_counter()
    result = train(cfg, **kwargs)
    return result, time.perf_counter() - start
