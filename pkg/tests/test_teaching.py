import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grant.teaching import (
    SelectionError,
    SelectionPolicy,
    build_schedule,
    keep_count,
    residual_scores,
    select_batches_B,
    select_graphs_S,
    select_top_m,
)

from oracles import brute_select_S, brute_top_m, exact_keep

score_lists = st.lists(st.integers(0, 4).map(float), min_size=1, max_size=12)


class TestResidualScores:
    def test_perfect(self):
        outs = [np.array([1.0]), np.array([2.0])]
        np.testing.assert_array_equal(residual_scores(outs, outs), [0, 0])

    def test_graph_level(self):
        s = residual_scores([np.array([v]) for v in (1, 4, 2)], [np.array([v]) for v in (0, 1, 5)])
        np.testing.assert_array_equal(s, [1, 3, 3])

    def test_node_level(self):
        s = residual_scores([np.array([[3.0], [4.0]])], [np.zeros((2, 1))], "node", [2])
        assert s[0] == 2.5

    def test_multi_output_uses_euclidean_norm(self):
        assert residual_scores([np.array([3.0, 4.0])], [np.zeros(2)])[0] == 5.0

    def test_mask(self):
        s = residual_scores([np.array([3.0, 4.0])], [np.zeros(2)], masks=[np.array([1.0, 0.0])])
        assert s[0] == 3.0

    def test_misaligned(self):
        with pytest.raises(SelectionError):
            residual_scores([np.zeros(1)], [])
        with pytest.raises(SelectionError):
            residual_scores([np.zeros((2, 1))], [np.zeros((2, 1))], "node", [])


class TestTopM:
    def test_examples(self):
        assert sorted(select_top_m([1, 3, 3], 2)) == [1, 2]
        assert sorted(select_top_m([5, 1, 2], 3)) == [0, 1, 2]
        assert list(select_top_m([1, 1, 1], 2)) == [0, 1]

    def test_too_many(self):
        with pytest.raises(SelectionError):
            select_top_m([1.0], 2)

    @settings(max_examples=200, deadline=None)
    @given(scores=score_lists, data=st.data())
    def test_matches_brute_force(self, scores, data):
        m = data.draw(st.integers(0, len(scores)))
        assert list(select_top_m(scores, m)) == brute_top_m(scores, m)

    @settings(max_examples=100, deadline=None)
    @given(scores=st.lists(st.floats(0, 10), min_size=1, max_size=12),
           alpha=st.floats(1e-3, 1e3), data=st.data())
    def test_positive_scaling_invariance(self, scores, alpha, data):
        m = data.draw(st.integers(0, len(scores)))
        scaled = [alpha * s for s in scores]
        # scaling can merge distinct floats into ties only through underflow, which the range avoids
        if len(set(scaled)) == len(set(scores)):
            assert list(select_top_m(scaled, m)) == list(select_top_m(scores, m))


class TestBatchesB:
    def test_examples(self):
        assert set(select_batches_B([0.5, 0.9, 0.1], 2)) == {0, 1}
        assert select_batches_B([0.2, 0.7, 0.4], 3) == [0, 1, 2]
        assert select_batches_B([0.3], 1) == [0]

    @settings(max_examples=100, deadline=None)
    @given(scores=score_lists, data=st.data())
    def test_matches_brute_force(self, scores, data):
        m = data.draw(st.integers(0, len(scores)))
        assert select_batches_B(scores, m) == sorted(brute_top_m(scores, m))


class TestGraphsS:
    def test_ratio_one_repacks_everything(self):
        out = select_graphs_S([[0, 1, 2], [3, 4]], np.arange(5.0), 1.0, 2)
        assert sorted(sum(out, [])) == [0, 1, 2, 3, 4]
        assert [len(b) for b in out] == [2, 2, 1]

    def test_two_batches_half(self):
        scores = np.array([0.1, 0.9, 0.5, 0.3, 0.2, 0.8, 0.7, 0.0])
        out = select_graphs_S([[0, 1, 2, 3], [4, 5, 6, 7]], scores, 0.5, 4)
        assert out == [[1, 2, 5, 6]]

    def test_ceiling(self):
        assert keep_count(3, 0.4) == 2
        assert keep_count(10, 0.3) == 3
        assert keep_count(5, 0.01) == 1

    def test_bad_input(self):
        with pytest.raises(SelectionError):
            select_graphs_S([[0]], [1.0], 0.0, 1)
        with pytest.raises(SelectionError):
            select_graphs_S([[]], [], 0.5, 1)

    @settings(max_examples=200, deadline=None)
    @given(scores=score_lists, data=st.data())
    def test_matches_brute_force(self, scores, data):
        n = len(scores)
        cuts = sorted(data.draw(st.sets(st.integers(1, n - 1), max_size=3))) if n > 1 else []
        bounds = [0, *cuts, n]
        batches = [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
        ratio = data.draw(st.integers(1, 20)) / 20
        size = data.draw(st.integers(1, 12))
        out = select_graphs_S(batches, scores, ratio, size)
        assert out == brute_select_S(batches, scores, ratio, size)
        flat = sum(out, [])
        assert len(flat) == len(set(flat)) == sum(exact_keep(len(b), ratio) for b in batches)


class TestSchedule:
    def test_table_row(self):
        sched = build_schedule(0.05, 750)
        assert len(sched.stages) == 50
        assert sched.stages[0].ratio == 0.05 and sched.stages[-1].ratio == 1.0
        assert sched.stages[0].interval == 1 and sched.stages[-1].interval == 15
        assert sched.stages[0].epoch_start == 1

    def test_full_ratio(self):
        sched = build_schedule(1.0, 200)
        assert all(st.ratio == 1.0 for st in sched.stages)
        assert sched.stages[-1].interval == 4

    def test_fifty_epochs(self):
        sched = build_schedule(0.2, 50, max_interval=5)
        assert [st.epoch_start for st in sched.stages] == list(range(1, 51))
        intervals = [st.interval for st in sched.stages]
        assert intervals == [int(np.floor(1 + 4 * s / 49 + 0.5)) for s in range(50)]
        assert intervals[0] == 1 and intervals[-1] == 5
        # every epoch starts a stage, so every epoch is an event
        assert sched.event_epochs() == list(range(1, 51))

    def test_short_runs(self):
        sched = build_schedule(0.5, 7)
        assert len(sched.stages) == 7
        assert sched.stages[-1].ratio == 1.0

    def test_invalid(self):
        with pytest.raises(SelectionError):
            build_schedule(0.0, 10)
        with pytest.raises(SelectionError):
            build_schedule(0.5, 0)
        with pytest.raises(SelectionError):
            SelectionPolicy("B", 1.5)
        with pytest.raises(SelectionError):
            SelectionPolicy("C", 0.5)

    @settings(max_examples=60, deadline=None)
    @given(ratio=st.floats(0.01, 1.0), epochs=st.integers(1, 2000), interval=st.integers(0, 40))
    def test_monotone(self, ratio, epochs, interval):
        sched = build_schedule(ratio, epochs, interval)
        assert len(sched.stages) == min(50, epochs)
        starts = [s.epoch_start for s in sched.stages]
        assert starts[0] == 1 and all(a < b for a, b in zip(starts, starts[1:]))
        for a, b in zip(sched.stages, sched.stages[1:]):
            assert a.interval <= b.interval and a.ratio <= b.ratio
        events = sched.event_epochs()
        assert set(starts) <= set(events)
