import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leaf.choices import (
    ALL_TRANSFORMS,
    TransformKind,
    apply_transform,
    build_choice_set,
    build_choice_sets,
    parse_transforms,
)
from leaf.selector import huber_distance

flows = arrays(np.float64, 12, elements=st.floats(0, 500))


def smoothing_oracle(y):
    out = []
    for t in range(len(y)):
        window = [y[max(t - 1, 0)], y[t], y[min(t + 1, len(y) - 1)]]
        out.append(sum(window) / 3)
    return np.array(out)


class TestTransforms:
    def test_upward_trend_exact(self):
        assert apply_transform([100.0] * 12, TransformKind.UPWARD_TREND).tolist() == list(range(101, 113))

    def test_downward_trend_exact(self):
        assert apply_transform([100.0] * 12, TransformKind.DOWNWARD_TREND).tolist() == list(range(99, 87, -1))

    def test_over_and_under_exact(self):
        assert apply_transform([100.0] * 12, TransformKind.OVERESTIMATE).tolist() == [105.0] * 12
        assert apply_transform([100.0] * 12, TransformKind.UNDERESTIMATE).tolist() == [95.0] * 12

    def test_smoothing_spike(self):
        y = [0.0, 12.0] + [0.0] * 10
        assert apply_transform(y, TransformKind.SMOOTHING).tolist() == [4.0, 4.0, 4.0] + [0.0] * 9

    @given(flows)
    def test_smoothing_matches_oracle(self, y):
        np.testing.assert_allclose(apply_transform(y, TransformKind.SMOOTHING), smoothing_oracle(y),
                                   atol=1e-12, rtol=1e-12)

    @given(flows)
    def test_identity(self, y):
        assert np.array_equal(apply_transform(y, TransformKind.IDENTITY), y)

    def test_trends_are_not_inverse(self):
        y = np.full(12, 100.0)
        round_trip = apply_transform(apply_transform(y, TransformKind.UPWARD_TREND), TransformKind.DOWNWARD_TREND)
        assert not np.array_equal(round_trip, y)

    def test_clamped_at_zero(self):
        y = np.full(200, 10.0)
        assert apply_transform(y, TransformKind.DOWNWARD_TREND).min() == 0.0

    @given(flows, st.sampled_from(list(TransformKind)))
    def test_shape_and_sign(self, y, kind):
        out = apply_transform(y, kind)
        assert out.shape == y.shape and np.all(out >= 0)
        assert np.array_equal(out, apply_transform(y, kind))

    def test_parse_names(self):
        assert parse_transforms(["smoothing", "UPWARD_TREND", "downward trend"]) == ALL_TRANSFORMS[:3]
        with pytest.raises(KeyError):
            parse_transforms(["sideways"])


class TestChoiceSet:
    def test_full_set(self):
        cs = build_choice_set({"graph": np.full(12, 10.0), "hypergraph": np.full(12, 20.0)}, vertex=3)
        assert len(cs) == 12 and cs.vertex == 3
        assert [c.label for c in cs.choices] == list(range(1, 13))
        assert cs[1].source == "graph" and cs[1].transform is TransformKind.IDENTITY
        assert cs[2].source == "hypergraph" and cs[2].transform is TransformKind.IDENTITY
        assert [c.source for c in cs.choices[2:7]] == ["graph"] * 5
        assert [c.transform for c in cs.choices[7:]] == list(ALL_TRANSFORMS)

    def test_no_transforms(self):
        cs = build_choice_set({"graph": np.ones(12), "hypergraph": np.zeros(12)}, 0, transforms=())
        assert len(cs) == 2
        assert np.array_equal(cs.values(), [np.ones(12), np.zeros(12)])

    def test_duplicates_kept(self):
        y = np.arange(12.0)
        cs = build_choice_set({"graph": y, "hypergraph": y}, 0)
        assert len(cs) == 12
        assert np.array_equal(cs[1].values, cs[2].values)

    def test_labels_are_one_based(self):
        cs = build_choice_set({"graph": np.ones(12), "hypergraph": np.ones(12)}, 0)
        with pytest.raises(IndexError):
            cs[0]

    def test_describe(self):
        cs = build_choice_set({"graph": np.ones(12), "hypergraph": np.ones(12)}, 0)
        assert cs[1].describe() == "graph branch"
        assert cs[12].describe().startswith("hypergraph branch + underestimate")

    def test_per_vertex(self):
        g = np.arange(36.0).reshape(3, 12)
        sets = build_choice_sets({"graph": g, "hypergraph": g + 1})
        assert [cs.vertex for cs in sets] == [0, 1, 2]
        assert np.array_equal(sets[2][2].values, g[2] + 1)


@given(flows, flows, flows)
def test_superset_never_worse(yg, yh, truth):
    full = build_choice_set({"graph": yg, "hypergraph": yh}, 0)
    base = build_choice_set({"graph": yg, "hypergraph": yh}, 0, transforms=())
    best_full = min(huber_distance(v, truth) for v in full.values())
    best_base = min(huber_distance(v, truth) for v in base.values())
    assert best_full <= best_base
    assert np.all(full.values() >= 0)
