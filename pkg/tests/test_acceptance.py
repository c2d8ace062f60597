"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The training-based criteria (6-10) run the desk profile (n=2000, 30 epochs)
on seeds 0, 1 and 2. Runs are cached for the session, so the whole module
costs roughly 21 desk trainings (about 45 minutes on one CPU core).
"""

import copy
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gazemoe.checkpoint import read_checkpoint, restore_model, save_checkpoint, write_checkpoint
from gazemoe.config import load_config
from gazemoe.diagnostics import run_gradcheck
from gazemoe.losses import angular_loss
from gazemoe.tensor import Tensor, default_dtype
from gazemoe.train import evaluate, load_splits, ridge_baseline, train
from gazemoe.transformer import MoEFFN, load_balance_loss, route_logits

SEEDS = (0, 1, 2)
SETTINGS = {
    "full": {},
    "f1": {"train.feature_combo": ["F1"]},
    "f1+f2": {"train.feature_combo": ["F1", "F2"]},
    "f1+f2+cnn": {"train.feature_combo": ["F1", "F2", "CNN"]},
    "dense": {"train.moe_enabled": False},
    "lr=1e-3": {"train.lr_max": 1e-3},
    "lr=1e-5": {"train.lr_max": 1e-5},
}


def report(number, title, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


class Runs:
    """Desk-profile training runs, trained lazily and cached for the session."""

    def __init__(self, tmp):
        self.tmp = tmp
        self.results = {}
        self.splits = {}
        self.max_active = {}

    def cfg(self, label, seed):
        return load_config(profile="desk", overrides={**SETTINGS[label], "seed": seed})

    def get_splits(self, seed):
        if seed not in self.splits:
            self.splits[seed] = load_splits(self.cfg("full", seed))
        return self.splits[seed]

    def get(self, label, seed):
        key = (label, seed)
        if key not in self.results:
            cfg = self.cfg(label, seed)
            active = []

            def on_step(step, result):
                active.append(max((int(d.active_per_token.max(initial=0)) for d in result.decisions), default=0))

            start = time.perf_counter()
            metrics = self.tmp / f"{label}_{seed}.csv"
            result = train(cfg, self.get_splits(seed), metrics_path=metrics, on_step=on_step)
            self.results[key] = (result, time.perf_counter() - start, metrics)
            self.max_active[key] = active
        return self.results[key]

    def error(self, label, seed):
        return self.get(label, seed)[0].final.test_error_deg

    def mean(self, label):
        return float(np.mean([self.error(label, s) for s in SEEDS]))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def fmt(errors):
    return ", ".join(f"{e:.2f}" for e in errors)


# -- analytic criteria --------------------------------------------------------------


def test_criterion_01_gradcheck_tiny_profile():
    start = time.perf_counter()
    rep = run_gradcheck(load_config(profile="tiny"))
    elapsed = time.perf_counter() - start
    worst = max(rep.group_errors, key=rep.group_errors.get)
    required = {"prototypes", "projections", "attention", "routed_experts", "shared_experts", "router", "head"}
    ok = rep.passed and required <= set(rep.group_errors) and elapsed < 60
    report(1, "full-pipeline gradient check, every group < 1e-3, < 60 s", ok,
           f"{rep.parameters} params, worst {worst} {rep.group_errors[worst]:.1e}, {elapsed:.1f} s")


def test_criterion_02_angular_loss_identities():
    with default_dtype(np.float64):
        z = np.array([0.0, 0.0, 1.0])
        vals = [angular_loss(Tensor(z), z).item(),
                angular_loss(Tensor([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])).item(),
                angular_loss(Tensor(z), -z).item()]
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            p, g = rng.normal(size=3), rng.normal(size=3)
            c = rng.uniform(1e-2, 1e2)
            worst = max(worst, abs(angular_loss(Tensor(p), g).item() - angular_loss(Tensor(c * p), g).item()))
    ok = all(abs(v - e) < 1e-6 for v, e in zip(vals, (0.0, 1.0, 2.0))) and worst < 1e-6
    report(2, "angular loss 0/1/2 and scale invariance", ok, f"values {fmt(vals)}, scale drift {worst:.1e}")


def test_criterion_03_dense_equivalence():
    moe = MoEFFN(16, 32, routed=8, top_k=8, shared=0, rng=np.random.default_rng(0))
    moe.router.weight.data[...] = 0.0
    h = Tensor(np.random.default_rng(1).normal(size=(50, 16)))
    out, _ = moe.mix(h)
    brute = np.mean([e(h).data for e in moe.experts], axis=0)
    diff = float(np.abs(out.data - brute).max())
    report(3, "K=E with equal logits equals mean of experts within 1e-5", diff < 1e-5, f"max diff {diff:.1e}")


def test_criterion_05_load_balance_extremes():
    e = 4
    uniform = load_balance_loss([route_logits(Tensor(np.eye(e) * 3.0), 1)]).item()
    collapsed_logits = np.zeros((16, e))
    collapsed_logits[:, 0] = 1000.0
    collapsed = load_balance_loss([route_logits(Tensor(collapsed_logits), 1)]).item()
    ok = abs(uniform - 1.0) < 1e-6 and abs(collapsed - e) < 1e-6
    report(5, "load balance = 1 when uniform, = E when collapsed", ok, f"uniform {uniform:.7f}, collapsed {collapsed:.7f}")


# -- training criteria ------------------------------------------------------------------


def test_criterion_04_routing_sparsity(runs):
    cfg = runs.cfg("full", 0)
    runs.get("full", 0)
    active = runs.max_active[("full", 0)]
    ok = len(active) >= 500 and max(active) <= cfg.model.top_k
    report(4, "at most K routed experts per token on every batch", ok,
           f"{len(active)} steps, max active {max(active)}, K={cfg.model.top_k}")


def test_criterion_06_learnability(runs):
    model_err, ridge_err, times = [], [], []
    for s in SEEDS:
        result, elapsed, _ = runs.get("full", s)
        model_err.append(result.final.test_error_deg)
        sp = runs.get_splits(s)
        ridge_err.append(ridge_baseline(sp.train, sp.val, sp.test)[0])
        times.append(elapsed)
    ok = np.mean(model_err) < np.mean(ridge_err) and max(times) < 15 * 60
    report(6, "beats ridge baseline, < 15 min per run", ok,
           f"model {np.mean(model_err):.2f} [{fmt(model_err)}] vs ridge {np.mean(ridge_err):.2f} "
           f"[{fmt(ridge_err)}], slowest run {max(times):.0f} s")


def test_criterion_07_feature_fusion_trend(runs):
    m = {k: runs.mean(k) for k in ("full", "f1+f2+cnn", "f1+f2", "f1")}
    ok = m["full"] <= m["f1+f2+cnn"] <= m["f1+f2"] and m["full"] <= 0.9 * m["f1"]
    report(7, "full <= f1+f2+cnn <= f1+f2 and full >= 10% below f1", ok,
           ", ".join(f"{k} {v:.2f}" for k, v in m.items()))


def test_criterion_08_moe_trend(runs):
    moe, dense = runs.mean("full"), runs.mean("dense")
    report(8, "MoE mean error <= dense mean error", moe <= dense, f"MoE {moe:.2f}, dense {dense:.2f}")


def test_criterion_09_learning_rate_trend(runs):
    m = {k: runs.mean(k) for k in ("lr=1e-3", "full", "lr=1e-5")}
    ok = m["full"] < m["lr=1e-3"] and m["full"] < m["lr=1e-5"]
    report(9, "lr 1e-4 lowest among 1e-3, 1e-4, 1e-5", ok,
           f"1e-3 {m['lr=1e-3']:.2f}, 1e-4 {m['full']:.2f}, 1e-5 {m['lr=1e-5']:.2f}")


def test_criterion_10_determinism_and_persistence(runs, tmp_path):
    result, _, metrics = runs.get("full", 0)
    cfg = runs.cfg("full", 0)
    again = tmp_path / "again.csv"
    train(cfg, runs.get_splits(0), metrics_path=again)
    same_csv = again.read_bytes() == metrics.read_bytes()

    path, resaved = tmp_path / "model.gzmx", tmp_path / "resaved.gzmx"
    save_checkpoint(path, cfg, result.model, result.optimizer, result.steps)
    ckpt = read_checkpoint(path)
    write_checkpoint(resaved, ckpt)
    same_ckpt = resaved.read_bytes() == path.read_bytes()

    splits = copy.copy(runs.get_splits(0))
    splits.frozen = {}
    reloaded = evaluate(restore_model(ckpt), splits.test)
    same_eval = reloaded == result.final.test_error_deg
    report(10, "byte-identical metrics and checkpoint, exact eval after load", same_csv and same_ckpt and same_eval,
           f"csv {same_csv}, checkpoint {same_ckpt}, eval {reloaded!r} vs {result.final.test_error_deg!r}")
