import hashlib
import math

import numpy as np
import pytest

from moegt.data import NodeKind, fit_scaler, generate_synthetic
from moegt.data.batching import EncodedDataset
from moegt.errors import ConfigError, EmptySubsetError
from moegt.explain import (ALL_FEATURES, AttentionSummary, Subset, SubsetSelector, aggregate_attention, delta_r,
                           diagnostics_rows, export_bars, export_diagnostics, export_heatmap, expert_specialization,
                           feature_ablation, feature_mask, heatmap_pgm, invariant_mass_bb, parse_cell,
                           read_attention_csv, read_pgm, read_specialization_csv, select, uniform_entropy)
from moegt.models import ModelConfig, build_model
from moegt.training import TrainConfig

SMALL = ModelConfig(hidden=16, heads=2, experts=6, top_k=2, expert_size=8)


@pytest.fixture(scope="module")
def data():
    events = generate_synthetic(40, 40, seed=41)
    return events, EncodedDataset(events, fit_scaler(events))


@pytest.fixture(scope="module")
def model():
    m = build_model(SMALL, 3)
    rng = np.random.default_rng(3)
    for t in m.parameters():
        t.data = t.data + rng.standard_normal(t.shape) * 0.3
    return m


# --- subsets ---------------------------------------------------------------------------

def test_selector_parse_and_names():
    s = SubsetSelector.parse("test-correct-signal", 7)
    assert s.subset is Subset.TEST_CORRECT_SIGNAL and s.name == "test-correct-signal/7-nodes"
    assert SubsetSelector.parse("train-all").source == "train"
    with pytest.raises(ConfigError, match="valid"):
        SubsetSelector.parse("everything")
    with pytest.raises(ConfigError):
        SubsetSelector(Subset.TEST_ALL, 5)


def test_selection_is_a_predicate_over_event_and_prediction(data):
    events, ds = data
    preds = np.array([1 - int(e.label) if i % 3 == 0 else int(e.label) for i, e in enumerate(events)])
    mis = select(ds, SubsetSelector(Subset.TEST_MISCLASSIFIED), preds)
    np.testing.assert_array_equal(mis, np.arange(0, len(events), 3))
    sig = select(ds, SubsetSelector(Subset.TEST_CORRECT_SIGNAL, 6), preds)
    assert all(events[i].label == 1 and events[i].n_nodes == 6 and i % 3 for i in sig)
    bkg = select(ds, SubsetSelector(Subset.TEST_CORRECT_BACKGROUND), preds)
    assert set(sig).isdisjoint(bkg) and set(mis).isdisjoint(bkg)


def test_empty_subset_names_selector(data):
    events, ds = data
    preds = np.array([int(e.label) for e in events])
    with pytest.raises(EmptySubsetError, match="test-misclassified"):
        select(ds, SubsetSelector(Subset.TEST_MISCLASSIFIED), preds)


# --- attention ---------------------------------------------------------------------------

def test_single_event_summary_is_verbatim(model, data):
    _, ds = data
    sub = EncodedDataset([ds.events[0]], fit_scaler(ds.events))
    summaries = aggregate_attention(model, sub, SubsetSelector(Subset.TEST_ALL))
    res = model.forward(ds.batch([0]), capture=True)
    assert len(summaries) == 4
    for s in summaries:
        (n, w), = res.attention[s.layer]
        assert s.count == 1 and s.n_nodes == n
        np.testing.assert_array_equal(s.matrix, w[0, s.head])


def test_two_event_average_matches_elementwise_mean(model, data):
    events, _ = data
    pair = [e for e in events if e.n_nodes == 7][:2]
    scaler = fit_scaler(events)
    maps = []
    for ev in pair:
        one = EncodedDataset([ev], scaler)
        maps.append(model.forward(one.batch([0]), capture=True).attention)
    both = aggregate_attention(model, EncodedDataset(pair, scaler), SubsetSelector(Subset.TEST_ALL))
    for s in both:
        expected = (maps[0][s.layer][0][1][0, s.head] + maps[1][s.layer][0][1][0, s.head]) / 2
        np.testing.assert_allclose(s.matrix, expected, atol=1e-15)
        assert s.count == 2


def test_zero_query_key_gives_uniform_maps(data):
    _, ds = data
    m = build_model(SMALL, 0)
    for l in range(2):
        m.params[f"layers.{l}.attn.w_q"].data[:] = 0.0
    summaries = aggregate_attention(m, ds, SubsetSelector(Subset.TEST_ALL))
    assert {(s.layer, s.head, s.n_nodes) for s in summaries} == {(l, h, n) for l in (0, 1) for h in (0, 1)
                                                                  for n in (6, 7)}
    for s in summaries:
        np.testing.assert_allclose(s.matrix, 1.0 / s.n_nodes, atol=1e-15)


def test_summaries_are_row_stochastic_for_every_subset(model, data):
    _, ds = data
    for subset in Subset:
        try:
            summaries = aggregate_attention(model, ds, SubsetSelector(subset))
        except EmptySubsetError:
            continue
        for s in summaries:
            np.testing.assert_allclose(s.matrix.sum(axis=1), 1.0, atol=1e-6)


def test_attention_needs_transformer(data):
    _, ds = data
    with pytest.raises(ConfigError):
        aggregate_attention(build_model(ModelConfig(kind="mlp"), 0), ds, SubsetSelector())


# --- specialisation --------------------------------------------------------------------------

def test_counting_identity(model, data):
    _, ds = data
    table = expert_specialization(model, ds)
    for layer in range(2):
        np.testing.assert_array_equal(table.totals(layer), 2 * table.nodes)
    assert table.nodes[NodeKind.LEPTON] == len(ds)
    weighted = expert_specialization(model, ds, weighted=True)
    np.testing.assert_allclose(weighted.totals(0), table.nodes, atol=1e-9)


def test_hundred_leptons_give_total_two_hundred(model):
    events = generate_synthetic(50, 50, seed=5)
    table = expert_specialization(model, EncodedDataset(events, fit_scaler(events)))
    assert table.totals(0)[NodeKind.LEPTON] == 200


def test_forced_gate_routes_everything_to_expert(data):
    _, ds = data
    m = build_model(SMALL, 1)
    d = SMALL.hidden
    for l in range(2):
        # constant gate input: every node's attention output becomes the all-ones row
        m.params[f"layers.{l}.attn.ln_gain"].data[:] = 0.0
        m.params[f"layers.{l}.attn.ln_bias"].data[:] = 1.0
        m.params[f"layers.{l}.gate.w_g"].data[:, 3] = 10.0 / d
    table = expert_specialization(m, ds)
    for l in range(2):
        np.testing.assert_array_equal(table.counts[l, 3], table.nodes)


def test_entropy_and_dominant_pair():
    from moegt.explain import SpecializationTable
    counts = np.zeros((1, 6, 7), dtype=int)
    counts[0, :, 0] = 10
    counts[0, 2, 1], counts[0, 4, 1] = 30, 10
    table = SpecializationTable(counts, np.array([30, 20, 0, 0, 0, 0, 0]), 2)
    assert table.entropy(0, NodeKind.J1) == pytest.approx(math.log(6))
    assert table.dominant_pair(0, NodeKind.J2) == ((2, 4), 1.0)
    assert uniform_entropy(6) == math.log(6)


def test_specialization_needs_mgt(data):
    _, ds = data
    with pytest.raises(ConfigError):
        expert_specialization(build_model(ModelConfig(kind="gt"), 0), ds)


# --- feature hiding -------------------------------------------------------------------------

def test_parse_cell():
    assert parse_cell("b1.F1") == (NodeKind.B1, 0)
    assert parse_cell("energy.F6") == (NodeKind.ENERGY, 5)
    for bad in ("b1.F5x", "muon.F1", "lepton.F4", "b1", "b1.G1"):
        with pytest.raises(ConfigError):
            parse_cell(bad)
    assert len(ALL_FEATURES) == 28


def test_mask_hides_bjet_copies_in_jets(data):
    events, _ = data
    mask = feature_mask(events, ["b1.F1", "b1.F4"])
    for i, ev in enumerate(events):
        b1 = ev.kinds.index(NodeKind.B1)
        assert mask[i, b1, 0] and mask[i, b1, 3] and not mask[i, b1, 1]
        copies = [r for r, k in enumerate(ev.kinds) if k.label.startswith("j")
                  and np.array_equal(ev.features[r, :4], ev.features[b1, :4])]
        for r in copies:
            assert mask[i, r, 0] and mask[i, r, 3]
        assert mask[i].sum() == 2 * (1 + len(copies))
    assert not feature_mask(events, ["b1.F1"], hide_copies=False)[:, :2].any()
    assert not feature_mask(events, []).any()


def test_ablation_empty_and_all_groups(data):
    events, _ = data
    train_events = generate_synthetic(150, 150, seed=42)
    cfg = TrainConfig(model=ModelConfig(kind="mlp", mlp_hidden=(16, 8)), epochs=3, batch_size=50)
    baseline, rows = feature_ablation(cfg, train_events, events,
                                      {"none": [], "everything": list(ALL_FEATURES)})
    by = {r.group: r for r in rows}
    assert by["none"].delta == 0.0
    assert abs(by["everything"].auc - 0.5) <= 0.05
    assert [r.delta for r in rows] == sorted((r.delta for r in rows), reverse=True)
    with pytest.raises(ConfigError):
        feature_ablation(cfg, train_events, events, {"bad": ["tau.F1"]})


# --- kinematics ------------------------------------------------------------------------------

def test_delta_r_examples():
    row = lambda eta, phi: [50.0, eta, phi, 0.9, 4.0, 0.0]
    assert delta_r(row(0.3, 1.0), row(0.3, 1.0)) == 0.0
    assert delta_r(row(0.5, math.pi - 0.1), row(0.5, -math.pi + 0.1)) == pytest.approx(0.2, abs=1e-12)


def test_back_to_back_massless_pair():
    from moegt.data.events import EventGraph, Label
    from moegt.data import KINDS_6
    f = np.zeros((6, 6))
    f[0] = f[2] = [50.0, 0.0, 0.0, 0.9, 0.0, 0.0]
    f[1] = f[3] = [50.0, 0.0, math.pi, 0.8, 0.0, 0.0]
    f[4] = [30.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    f[5] = [10.0, 0.0, 0.0, 0.0, 0.0, 1.0]
    ev = EventGraph(KINDS_6, f, Label.SIGNAL, None)
    assert invariant_mass_bb(ev) == pytest.approx(100.0, abs=1e-9)
    rows = diagnostics_rows([ev], [0.7])
    assert rows[0][1] == "signal" and rows[0][3] == pytest.approx(math.pi)


# --- export -------------------------------------------------------------------------------------

def test_pgm_hand_built():
    m = np.array([[0.0, 1.0], [0.5, 0.25]])
    expected = b"P5\n4 4\n255\n" + bytes([0, 0, 255, 255] * 2 + [128, 128, 64, 64] * 2)
    assert heatmap_pgm(m, cell=2) == expected


def test_pgm_golden_digest():
    m = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [1 / 3, 1 / 3, 1 / 3]])
    digest = hashlib.sha256(heatmap_pgm(m, cell=2)).hexdigest()
    assert digest == "956f6edcbb115a6de1e73239a00e56fdfda0818ad6ee9d2521b86fbbad4bea67"


def test_uniform_map_is_constant_image(tmp_path):
    s = AttentionSummary(1, 0, 7, np.full((7, 7), 1 / 7), 10)
    paths = export_heatmap([s], tmp_path)
    img = read_pgm(paths[1])
    assert img.shape == (7 * 16, 7 * 16) and np.all(img == 128)


def test_heatmap_export_golden_and_round_trip(tmp_path):
    m6 = np.tile(np.arange(6) / 15.0, (6, 1))
    paths = export_heatmap([AttentionSummary(0, 1, 6, m6, 3)], tmp_path)
    assert [p.name for p in paths] == ["attention.csv", "attention_l0_h1_n6.pgm"]
    digests = [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]
    assert digests == ["3dd1c0b41c1d8afda95cb51395f9d72b5ac58fd80c5a93ed0562147c79016f56",
                       "3ccecd243780bfdb8cf6475f8a009bc3a0712cc852bae3d3dbdc8b536f9c3f5b"]
    back = read_attention_csv(paths[0])
    np.testing.assert_array_equal(back[(0, 1, 6)], m6)


def test_bars_and_diagnostics_round_trip(model, data, tmp_path):
    events, ds = data
    table = expert_specialization(model, ds)
    path = export_bars(table, tmp_path)
    np.testing.assert_array_equal(read_specialization_csv(path), table.counts)
    diag = export_diagnostics(events, np.linspace(0, 1, len(events)), tmp_path)
    lines = diag.read_text().splitlines()
    assert lines[0] == "event,label,score,delta_r_bb,m_bb" and len(lines) == len(events) + 1
