import numpy as np
import pytest

from leaf import numerics as nx
from leaf.adapt import (
    AdaptConfig,
    SupervisionTargets,
    adapt_step,
    ranking_loss,
    ranking_terms,
    run_inference,
    supervision_targets,
)
from leaf.choices import build_choice_sets
from leaf.data import NormStats, ring_network
from leaf.numerics import Adam
from leaf.predictor import BranchConfig, Predictor
from leaf.selector import HeuristicSelector, OracleSelector, SelectionResult, heuristic_select, huber_distance
from leaf.stgraph import build_st_graph

CFG = AdaptConfig()


def huber_mean(a, b, delta=1.0):
    total = 0.0
    for x, y in zip(a, b):
        r = abs(x - y)
        total += 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)
    return total / len(a)


def loss_oracle(y, selected, others, eps=0.0):
    return max(huber_mean(y, selected) - min(huber_mean(y, o) for o in others) + eps, 0.0)


class TestRankingLoss:
    def test_zero_at_selected(self):
        y = np.array([0.3, -1.2, 2.0])
        assert ranking_loss(y, y, [y + 1, y - 2], CFG).item() == 0.0

    def test_analytic(self):
        # one step: 0.5 r^2 = 0.4 for the selected, 0.1 for the nearest other
        y = np.array([0.0])
        sel, near, far = np.array([np.sqrt(0.8)]), np.array([np.sqrt(0.2)]), np.array([0.9])
        assert ranking_loss(y, sel, [far, near], CFG).item() == pytest.approx(0.3, abs=1e-12)

    def test_margin(self):
        y = np.zeros(2)
        assert ranking_loss(y, y, [y + 0.1], AdaptConfig(epsilon=0.5)).item() == pytest.approx(0.5 - 0.005, abs=1e-15)

    def test_empty_others(self):
        with pytest.raises(nx.ContractError):
            ranking_loss(np.zeros(3), np.zeros(3), [], CFG)

    def test_exhaustive_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            choices = rng.normal(size=(12, 12)) * rng.uniform(0.1, 3)
            y = rng.normal(size=12)
            k = int(rng.integers(12))
            others = [c for j, c in enumerate(choices) if j != k]
            got = ranking_loss(y, choices[k], others, CFG).item()
            assert got >= 0
            assert got == pytest.approx(loss_oracle(y, choices[k], others), abs=1e-12)
            perm = [others[j] for j in rng.permutation(11)]
            assert ranking_loss(y, choices[k], perm, CFG).item() == got

    def test_vectorized_matches_rows(self):
        rng = np.random.default_rng(1)
        cands = rng.normal(size=(5, 4, 6))
        y = rng.normal(size=(5, 6))
        sel = np.array([0, 3, 1, 2, 2])
        mask = np.ones((5, 4), bool)
        mask[np.arange(5), sel] = False
        terms = ranking_terms(nx.Tensor(y), cands, sel, mask, 0.0, 1.0).data
        for i in range(5):
            others = [cands[i, j] for j in range(4) if mask[i, j]]
            assert terms[i] == pytest.approx(loss_oracle(y[i], cands[i, sel[i]], others), abs=1e-12)

    def test_gradient_through_branch(self, toy_setup, rng):
        st, pred = toy_setup
        x = rng.normal(size=(1, 3, 4, 1))
        cands = rng.normal(size=(4, 5, 3)) * 2
        sel = np.array([0, 1, 2, 3])
        mask = np.ones((4, 5), bool)
        mask[np.arange(4), sel] = False

        def loss():
            out = pred.graph.forward(x, st)
            return nx.mean(ranking_terms(nx.reshape(out, (4, 3)), cands, sel, mask, 0.0, 1.0))

        assert loss().item() > 0  # away from the hinge kink
        errs = nx.gradcheck(loss, pred.graph.parameters())
        assert max(errs.values()) < 1e-4


# --- adaptation steps ------------------------------------------------------------

STATS = NormStats(np.array([100.0]), np.array([20.0]))


@pytest.fixture
def loop_setup(toy_cfg):
    net = ring_network(4)
    st = build_st_graph(net, toy_cfg.T)
    pred = Predictor.init(toy_cfg, seed=3)
    rng = np.random.default_rng(4)
    raw = rng.uniform(60, 140, size=(3, 4, 1))
    times = np.datetime64("2024-01-02T08:00") + np.arange(3) * np.timedelta64(5, "m")
    truth = rng.uniform(60, 140, size=(4, 3))
    return net, st, pred, raw, times, truth


def _targets(pred, st, raw, label=None, truth=None):
    x = STATS.normalize(raw)[None]
    fc = {b: STATS.denormalize_flow(pred.branch(b).forward(x, st).data[0]) for b in ("graph", "hypergraph")}
    sets = build_choice_sets(fc)
    if label is not None:
        sels = [SelectionResult(cs.vertex, label, cs[label].values, "", "test") for cs in sets]
    else:
        sels = OracleSelector().select(sets, truth=truth)
    return x, sets, sels, supervision_targets(sets, sels, STATS)


def test_m_zero_leaves_parameters(loop_setup):
    _, st, pred, raw, _, truth = loop_setup
    x, _, _, tg = _targets(pred, st, raw, truth=truth)
    before = pred.state()
    out = adapt_step(pred, st, x, tg, Adam(pred.parameters(), lr=1e-2), AdaptConfig(M=0))
    assert all(np.array_equal(before[k], v) for k, v in pred.state().items())
    assert len(out.losses) == 1


def test_graph_term_zero_when_graph_selected(loop_setup):
    _, st, pred, raw, _, _ = loop_setup
    x, _, _, tg = _targets(pred, st, raw, label=1)
    out = adapt_step(pred, st, x, tg, Adam(pred.parameters(), lr=1e-4), AdaptConfig(M=1))
    assert np.all(out.per_vertex["graph"] == 0.0)


def test_descent_small_lr(loop_setup):
    _, st, pred, raw, _, truth = loop_setup
    x, _, _, tg = _targets(pred, st, raw, truth=truth)
    out = adapt_step(pred, st, x, tg, Adam(pred.parameters(), lr=1e-5), AdaptConfig(M=5))
    assert len(out.losses) == 6 and out.losses[0] > 0
    assert out.losses[-1] <= out.losses[0]


def test_non_finite_rolls_back(loop_setup):
    _, st, pred, raw, _, truth = loop_setup
    x, _, _, tg = _targets(pred, st, raw, truth=truth)
    bad = SupervisionTargets(np.full_like(tg.candidates, np.nan), tg.selected, tg.others)
    before = pred.state()
    opt = Adam(pred.parameters(), lr=1e-2)
    out = adapt_step(pred, st, x, bad, opt, AdaptConfig(M=3))
    assert out.rolled_back
    assert all(np.array_equal(before[k], v) for k, v in pred.state().items())
    assert opt.t == 0 and len(nx.current_tape()) == 0


def test_fallback_counts_all_choices_as_others(loop_setup):
    _, st, pred, raw, _, _ = loop_setup
    _, sets, _, _ = _targets(pred, st, raw, label=1)
    sels = [SelectionResult(cs.vertex, None, cs.base_values().mean(axis=0), "?", "llm", True) for cs in sets]
    tg = supervision_targets(sets, sels, STATS)
    assert tg.others[:, :12].all() and not tg.others[:, 12].any()
    np.testing.assert_allclose(STATS.denormalize_flow(tg.candidates[:, 12]), [s.values for s in sels])


def test_missing_selection_rejected(loop_setup):
    _, st, pred, raw, _, truth = loop_setup
    _, sets, sels, _ = _targets(pred, st, raw, truth=truth)
    with pytest.raises(ValueError):
        supervision_targets(sets, sels[:-1], STATS)


# --- full loop -------------------------------------------------------------------

def _run(loop_setup, selector, cfg, **kw):
    net, st, pred, raw, times, truth = loop_setup
    return run_inference(raw, times, st, pred, selector, cfg, STATS, net, truth=truth, **kw)


def test_k1_returns_first_pass_selections(loop_setup):
    res = _run(loop_setup, HeuristicSelector(), AdaptConfig(K=1, M=5))
    sets = build_choice_sets(res.first_pass)
    raw = loop_setup[3]
    expected = np.stack([heuristic_select(cs, raw[:, cs.vertex, 0]).values for cs in sets])
    assert np.array_equal(res.forecast, expected)
    assert len(res.selections) == 1 and len(res.audit) == 4


def test_oracle_recovers_truth_in_choice_set(loop_setup):
    net, st, pred, raw, times, _ = loop_setup
    with nx.no_grad():
        g = STATS.denormalize_flow(pred.graph.forward(STATS.normalize(raw)[None], st).data[0])
    truth = g * 105 / 100
    res = run_inference(raw, times, st, pred, OracleSelector(), AdaptConfig(K=1), STATS, net, truth=truth)
    assert np.all(huber_distance(res.forecast, truth) == 0)
    assert [s.chosen_label for s in res.selections[0]] == [6] * 4  # graph + overestimate


def test_last_iteration_oracle_optimality(loop_setup):
    res = _run(loop_setup, OracleSelector(), AdaptConfig(K=2))
    assert len(res.selections) == 2
    for sel in res.selections[-1]:
        assert np.array_equal(res.forecast[sel.vertex], sel.values)
    assert {r["iteration"] for r in res.audit} == {1, 2}


def test_heuristic_loop_is_bit_identical(toy_cfg):
    outs = []
    for _ in range(2):
        net = ring_network(4)
        st = build_st_graph(net, toy_cfg.T)
        pred = Predictor.init(toy_cfg, seed=3)
        rng = np.random.default_rng(4)
        raw = rng.uniform(60, 140, size=(3, 4, 1))
        times = np.datetime64("2024-01-02T08:00") + np.arange(3) * np.timedelta64(5, "m")
        res = run_inference(raw, times, st, pred, HeuristicSelector(), AdaptConfig(), STATS, net)
        outs.append((res.forecast, pred.state()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert all(np.array_equal(outs[0][1][k], outs[1][1][k]) for k in outs[0][1])


def test_no_selector_returns_branch_mean(loop_setup):
    before = loop_setup[2].state()
    res = _run(loop_setup, None, AdaptConfig())
    np.testing.assert_array_equal(res.forecast, (res.first_pass["graph"] + res.first_pass["hypergraph"]) / 2)
    assert all(np.array_equal(before[k], v) for k, v in loop_setup[2].state().items())
    single = _run(loop_setup, None, AdaptConfig(), branches=("graph",))
    np.testing.assert_array_equal(single.forecast, single.first_pass["graph"])


def test_adaptation_changes_parameters(loop_setup):
    before = loop_setup[2].state()
    _run(loop_setup, OracleSelector(), AdaptConfig(K=2, M=2, lr=1e-3))
    after = loop_setup[2].state()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_config_validation():
    for bad in ({"K": 0}, {"M": -1}, {"epsilon": -0.1}):
        with pytest.raises(ValueError):
            AdaptConfig(**bad)
