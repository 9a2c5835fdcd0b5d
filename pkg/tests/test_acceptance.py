"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The learning and specialisation criteria train full-size models on the
default 40k-event synthetic split and take most of the suite's runtime.
"""

import math
import time

import numpy as np
import pytest

from moegt import physics
from moegt import tensor as T
from moegt.cli import main as cli_main
from moegt.data import NodeKind, generate_synthetic, split
from moegt.explain import expert_specialization, feature_ablation, invariant_mass_bb
from moegt.layers import (AttentionLayerParams, ExpertParams, GateParams, expert_forward, ffn, glorot,
                          grouped_attention, load_balance_loss, moe_dense, moe_forward, noisy_gate)
from moegt.metrics import auc_score, confusion_report
from moegt.models import ModelConfig, build_model, cross_entropy
from moegt.tensor import Tape, Tensor
from moegt.training import TrainConfig, evaluate, prepare_datasets, routing_balance_experiment, train

from conftest import ACCEPTANCE, degenerate_mgt, numeric_grad, rel_error

SEEDS = range(20)


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


# --- shared heavy fixtures ----------------------------------------------------------------

@pytest.fixture(scope="module")
def default_data():
    events = generate_synthetic(20000, 20000, seed=0)
    train_events, test_events = split(events, (0.8, 0.2), seed=0)
    scaler, train_ds, test_ds = prepare_datasets(train_events, test_events)
    return train_events, test_events, train_ds, test_ds


class TrainedModels:
    """Full-size runs on the default split, trained on first use and reused."""

    def __init__(self, data):
        self.data = data
        self.runs = {}

    def get(self, kind: str, seed: int):
        key = (kind, seed)
        if key not in self.runs:
            _, _, train_ds, test_ds = self.data
            cfg = TrainConfig(model=ModelConfig(kind=kind), eval_each_epoch=False)
            start = time.perf_counter()
            result = train(cfg, train_ds, seed)
            elapsed = time.perf_counter() - start
            self.runs[key] = (result.model, evaluate(result.model, test_ds), elapsed)
        return self.runs[key]


@pytest.fixture(scope="module")
def trained(default_data):
    return TrainedModels(default_data)


# --- 1. gradient suite -----------------------------------------------------------------------

def fd_max_error(loss_of, params) -> float:
    with Tape() as tape:
        loss = loss_of()
    grads = tape.gradient(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        original = p.data.copy()

        def f(v):
            p.data = v
            out = loss_of().item()
            p.data = original
            return out

        num = numeric_grad(f, original)
        p.data = original
        worst = max(worst, rel_error(g, num))
    return worst


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def layer_checks(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    d, n = 4, 6
    x = _param(rng, 2 * n, d)
    w = Tensor(rng.standard_normal((2 * n, d)))
    att = AttentionLayerParams(*[_param(rng, d, d, scale=0.5) for _ in range(4)],
                               Tensor(rng.uniform(0.5, 1.5, d), requires_grad=True), _param(rng, d, scale=0.3), 2)
    ex = ExpertParams(_param(rng, d, 5, scale=0.5), _param(rng, 5, scale=0.1),
                      _param(rng, 5, d, scale=0.5), _param(rng, d, scale=0.1))
    gp = GateParams(_param(rng, d, 3), _param(rng, d, 3), 2)
    gw = Tensor(rng.standard_normal((2 * n, 3)))
    logits = _param(rng, 5, 2, scale=2.0)
    labels = rng.integers(0, 2, 5)

    def gate_out():
        return T.sum_all(noisy_gate(x, gp, training=True, rng=np.random.default_rng(seed)).gates * gw)

    def load():
        g = noisy_gate(x, gp, training=True, rng=np.random.default_rng(seed))
        return load_balance_loss(g, 2, 1.0)

    return {
        "attention": fd_max_error(lambda: T.sum_all(grouped_attention(x, [(2, n)], att)[0] * w),
                                  [x, att.w_q, att.w_k, att.w_v, att.w_o, att.ln_gain, att.ln_bias]),
        "ffn": fd_max_error(lambda: T.sum_all(ffn(x, ex.w1, ex.b1, ex.w2, ex.b2) * w), [x, ex.w1, ex.b1, ex.w2, ex.b2]),
        "gate": fd_max_error(gate_out, [x, gp.w_g, gp.w_noise]),
        "expert": fd_max_error(lambda: T.sum_all(expert_forward(x, ex) * w), [x, ex.w1, ex.b1, ex.w2, ex.b2]),
        "load loss": fd_max_error(load, [x, gp.w_g, gp.w_noise]),
        "cross-entropy": fd_max_error(lambda: cross_entropy(logits, labels), [logits]),
    }


def end_to_end_check(seed: int, dataset) -> float:
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(hidden=8, heads=2, experts=3, expert_size=4), seed)
    for t in model.parameters():
        t.data = t.data + rng.standard_normal(t.shape) * 0.2
    batch = dataset.batch(rng.choice(len(dataset), 6, replace=False))
    targets = [model.params["input.w"], model.params["layers.0.gate.w_g"], model.params["head.w"]]

    def loss():
        res = model.forward(batch, training=True, rng=np.random.default_rng(seed))
        return cross_entropy(res.logits, batch.labels) + res.load_loss

    return fd_max_error(loss, targets)


def test_criterion_1_gradient_suite():
    events = generate_synthetic(30, 30, seed=99)
    _, ds, _ = prepare_datasets(events, None)
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in SEEDS:
        for name, err in layer_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
        worst["full MGT"] = max(worst.get("full MGT", 0.0), end_to_end_check(seed, ds))
    elapsed = time.perf_counter() - start
    ok = all(err < 1e-4 for name, err in worst.items() if name != "full MGT") and worst["full MGT"] < 1e-3
    ok = ok and elapsed < 60.0
    summary = ", ".join(f"{name} {err:.1e}" for name, err in worst.items())
    record(1, ok, f"max relative error over {len(SEEDS)} seeds: {summary}; {elapsed:.1f} s")


# --- 2. routing invariants ------------------------------------------------------------------

def test_criterion_2_routing_invariants():
    rng = np.random.default_rng(2024)
    d, n_exp, k = 80, 6, 2
    x = Tensor(rng.standard_normal((10_000, d)))
    gp = GateParams(glorot(rng, d, n_exp), glorot(rng, d, n_exp), k)
    # integer-valued logits make ties frequent, exercising the lowest-index rule
    tied = Tensor(rng.integers(-2, 3, (10_000, 4)).astype(float))
    tie_gate = GateParams(Tensor(np.hstack([np.eye(4), np.eye(4)[:, :2]])), Tensor(np.zeros((4, n_exp))), k)
    failures = []
    for label, xs, params, training in (("noisy", x, gp, True), ("inference", x, gp, False),
                                        ("tied", tied, tie_gate, False)):
        rec = noisy_gate(xs, params, training=training, rng=rng).record
        if not np.all((rec.gates > 0).sum(axis=1) == k):
            failures.append(f"{label}: nonzero count")
        if np.abs(rec.gates.sum(axis=1) - 1.0).max() > 1e-12:
            failures.append(f"{label}: gate sum")
        expected = np.zeros_like(rec.gates, dtype=bool)
        np.put_along_axis(expected, np.argsort(-rec.logits, axis=1, kind="stable")[:, :k], True, axis=1)
        if not np.array_equal(rec.gates > 0, expected):
            failures.append(f"{label}: selection")
    experts = [ExpertParams(glorot(rng, d, 20), small_bias(rng, 20), glorot(rng, 20, d), small_bias(rng, d))
               for _ in range(n_exp)]
    g = noisy_gate(x, gp, training=True, rng=rng)
    if not np.array_equal(moe_forward(x, g, experts).data, moe_dense(x, g.record.gates, experts)):
        failures.append("dense and sparse MoE differ")
    record(2, not failures, "10^4 nodes, k=2, noisy, inference and tied logits; dense == sparse"
           if not failures else "; ".join(failures))


def small_bias(rng, n):
    return Tensor(rng.uniform(-0.1, 0.1, n), requires_grad=True)


# --- 3. load-balancing efficacy -----------------------------------------------------------------

def test_criterion_3_load_balancing():
    start = time.perf_counter()
    balanced = routing_balance_experiment(1.0)
    unbalanced = routing_balance_experiment(0.0)
    elapsed = time.perf_counter() - start
    ok = balanced.cv < 0.3 and unbalanced.cv > 0.8 and elapsed < 120.0
    record(3, ok, f"CV {balanced.cv:.3f} with w_load=1 (counts {balanced.counts.tolist()}), "
                  f"{unbalanced.cv:.3f} with w_load=0 (counts {unbalanced.counts.tolist()}); {elapsed:.1f} s")


# --- 4. learning target --------------------------------------------------------------------------

def test_criterion_4_learning_target(trained):
    _, mgt_report, mgt_time = trained.get("mgt", 0)
    _, gt_report, _ = trained.get("gt", 0)
    ok = mgt_report.auc >= 0.95 and mgt_report.auc >= gt_report.auc - 0.01 and mgt_time < 30 * 60
    record(4, ok, f"MGT test AUC {mgt_report.auc:.4f} (accuracy {mgt_report.accuracy:.4f}, "
                  f"trained in {mgt_time / 60:.1f} min), GT test AUC {gt_report.auc:.4f}")


# --- 5. degenerate MGT equivalence ------------------------------------------------------------------

def test_criterion_5_degenerate_equivalence():
    events = generate_synthetic(50, 50, seed=5)
    _, ds, _ = prepare_datasets(events, None)
    gt = build_model(ModelConfig(kind="gt"), 5)
    rng = np.random.default_rng(5)
    for t in gt.parameters():
        t.data = t.data + rng.standard_normal(t.shape) * 0.1
    mgt = degenerate_mgt(gt)
    batch = ds.batch(np.arange(len(ds)))
    diff = float(np.abs(mgt.forward(batch).logits.data - gt.forward(batch).logits.data).max())
    record(5, diff <= 1e-10, f"max |logit difference| {diff:.2e} on {len(ds)} events")


# --- 6. specialisation ----------------------------------------------------------------------------

SPEC_LAYER = 0   # the first MoE layer


def specialisation_verdict(table) -> tuple[bool, str]:
    threshold = math.log(table.n_experts) - 0.5
    ents = {k: table.entropy(SPEC_LAYER, k) for k in NodeKind}
    low = sum(e < threshold for e in ents.values())
    pairs = {k: table.dominant_pair(SPEC_LAYER, k) for k in NodeKind}
    b_shared = pairs[NodeKind.B1][0] == pairs[NodeKind.B2][0]
    lm_shared = pairs[NodeKind.LEPTON][0] == pairs[NodeKind.ENERGY][0]
    ok = low >= 5 and b_shared and lm_shared
    ent_text = " ".join(f"{k.label}={e:.2f}" for k, e in ents.items())
    detail = (f"entropies {ent_text} ({low}/7 below {threshold:.2f}); b1/b2 pairs {pairs[NodeKind.B1][0]}"
              f"/{pairs[NodeKind.B2][0]}, lepton/energy pairs {pairs[NodeKind.LEPTON][0]}/{pairs[NodeKind.ENERGY][0]}")
    return ok, detail


def test_criterion_6_specialisation(trained, default_data):
    test_ds = default_data[3]
    verdicts = {}
    for seed in (0, 1, 2):
        passed = sum(ok for ok, _ in verdicts.values())
        failed = len(verdicts) - passed
        if passed >= 2 or failed >= 2:
            break   # the 2-of-3 outcome is already decided
        model, _, _ = trained.get("mgt", seed)
        verdicts[seed] = specialisation_verdict(expert_specialization(model, test_ds))
    passed = sum(ok for ok, _ in verdicts.values())
    detail = f"{passed}/{len(verdicts)} seeds pass; " + "; ".join(
        f"seed {s}: {'pass' if ok else 'fail'}, {text}" for s, (ok, text) in verdicts.items())
    record(6, passed >= 2, detail)


# --- 7. metric oracles ----------------------------------------------------------------------------

def pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(float(p > q) + 0.5 * float(p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(200):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 10, n) / 10.0 if i % 2 else rng.random(n)
        mismatches += auc_score(scores, labels) != pairwise_auc(scores, labels)
    identity_failures = 0
    for _ in range(1000):
        tp, fp, tn, fn = (int(v) for v in rng.integers(0, 100, 4))
        if tp + fp + tn + fn == 0:
            continue
        r = confusion_report(tp, fp, tn, fn, 0.5)
        checks = [math.isclose(r.accuracy, (tp + tn) / (tp + fp + tn + fn))]
        if tp + fp:
            checks.append(math.isclose(r.precision, tp / (tp + fp)))
        if tp + fn:
            checks.append(math.isclose(r.recall, tp / (tp + fn)))
        if r.precision + r.recall > 0:
            checks.append(math.isclose(r.f1, 2 * r.precision * r.recall / (r.precision + r.recall)))
        identity_failures += not all(checks)
    ok = mismatches == 0 and identity_failures == 0
    record(7, ok, f"{mismatches} AUC mismatches in 200 score sets; {identity_failures} identity failures "
                  f"in 1000 confusion matrices")


# --- 8. physics oracles and ablation ranking ----------------------------------------------------------

def rapidity_mass(pt1, eta1, phi1, m1, pt2, eta2, phi2, m2):
    """Pair mass from transverse masses and rapidities."""
    def mt_y(pt, eta, m):
        mt = math.sqrt(m * m + pt * pt)
        return mt, math.asinh(pt * math.sinh(eta) / mt)
    mt1, y1 = mt_y(pt1, eta1, m1)
    mt2, y2 = mt_y(pt2, eta2, m2)
    sq = m1 * m1 + m2 * m2 + 2.0 * (mt1 * mt2 * math.cosh(y1 - y2) - pt1 * pt2 * math.cos(phi1 - phi2))
    return math.sqrt(max(sq, 0.0))


ABLATION_GROUPS = {
    "b-jet pT and mass": ["b1.F1", "b2.F1", "b1.F5", "b2.F5"],
    "lepton and missing energy": ["lepton.F1", "energy.F1", "energy.F6"],
    "b-tag quantiles": ["b1.F4", "b2.F4"],
    "third jet": ["j3.F1", "j3.F2"],
}


def test_criterion_8_physics_and_ablation(default_data):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10_000):
        pt1, pt2 = rng.uniform(1, 300, 2)
        eta1, eta2 = rng.uniform(-2.5, 2.5, 2)
        phi1, phi2 = rng.uniform(-np.pi, np.pi, 2)
        m1, m2 = rng.uniform(0, 30, 2)
        got = physics.invariant_mass(physics.four_vector(pt1, eta1, phi1, m1), physics.four_vector(pt2, eta2, phi2, m2))
        want = rapidity_mass(pt1, eta1, phi1, m1, pt2, eta2, phi2, m2)
        dphi = math.remainder(phi1 - phi2, 2 * math.pi)
        dr_err = abs(physics.delta_r(eta1, phi1, eta2, phi2) - math.hypot(eta1 - eta2, dphi))
        worst = max(worst, abs(got - want) / max(1.0, want), dr_err)
    signal = generate_synthetic(10_000, 0, seed=123)
    mean_mass = float(np.mean([invariant_mass_bb(e) for e in signal]))

    train_events, test_events, _, _ = default_data
    cfg = TrainConfig(model=ModelConfig(kind="mlp"), eval_each_epoch=False)
    baseline, rows = feature_ablation(cfg, train_events, test_events, ABLATION_GROUPS)
    ok = worst <= 1e-9 and abs(mean_mass - 125.0) <= 1.5 and rows[0].group == "b-jet pT and mass"
    table = ", ".join(f"{r.group} {r.delta:+.4f}" for r in rows)
    record(8, ok, f"oracle error {worst:.1e}; signal m_bb mean {mean_mass:.2f} GeV; MLP baseline AUC "
                  f"{baseline:.4f}, AUC drops: {table}")


# --- 9. reproducibility ----------------------------------------------------------------------------

def test_criterion_9_reproducibility(tmp_path):
    data = tmp_path / "events.jsonl"
    assert cli_main(["gen", "--n-signal", "500", "--n-background", "500", "--seed", "9", "--out", str(data)]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["train", "--model", "mgt", "--seeds", "0,1", "--epochs", "2", "--data", str(data),
                         "--out", str(out)]) == 0
        outs.append({str(p.relative_to(out)): p.read_bytes() for p in out.rglob("*") if p.is_file()})
    compared = [k for k in outs[0] if k.endswith((".json", ".pgm", ".csv", ".jsonl")) and k != "manifest.json"]
    differing = [k for k in compared if outs[0][k] != outs[1].get(k)]
    kinds = {"checkpoint": sum("checkpoint" in k for k in compared), "metrics": sum("metrics" in k for k in compared),
             "heatmaps": sum(k.endswith(".pgm") for k in compared)}
    ok = not differing and outs[0].keys() == outs[1].keys() and all(kinds.values())
    record(9, ok, f"{len(compared)} files compared ({kinds}); differing: {differing or 'none'}")

