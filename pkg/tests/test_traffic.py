import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from charcorrect._validation import ShapeError
from charcorrect.traffic import (
    BackgroundModel,
    ClusterParams,
    CountParams,
    Rect,
    SceneParams,
    Trajectory,
    cluster_trajectories,
    count_vehicles,
    hue_distance,
    max_subrectangle,
    merge_rects,
    prefix_sums,
    read_scene,
    read_trajectories_csv,
    rect_sum,
    score_rect,
    synthesize_scene,
    trajectories_linked,
    update_background,
    write_scene,
)


def exhaustive_max_subrectangle(g):
    """O(h^2 w^2) scan; key = (-sum, area, row0, col0, row1, col1)."""
    h, w = g.shape
    best = None
    for r0, r1 in itertools.combinations_with_replacement(range(h), 2):
        for c0, c1 in itertools.combinations_with_replacement(range(w), 2):
            s = g[r0:r1 + 1, c0:c1 + 1].sum()
            key = (-s, (r1 - r0 + 1) * (c1 - c0 + 1), r0, c0, r1, c1)
            if best is None or key < best:
                best = key
    return Rect(*best[2:]), -best[0]


def closure(n, linked):
    R = np.eye(n, dtype=bool)
    for i, j in itertools.permutations(range(n), 2):
        R[i, j] |= linked(i, j)
    R |= R.T
    for k in range(n):
        R |= R[:, k:k + 1] & R[k:k + 1, :]
    return {frozenset(np.flatnonzero(r).tolist()) for r in R}


def random_rect(rng, h=30, w=30, size=8):
    r0, c0 = rng.integers(0, h), rng.integers(0, w)
    return Rect(int(r0), int(c0), int(r0 + rng.integers(0, size)), int(c0 + rng.integers(0, size)))


def line(tid, t0, n, x0, y0, dx, dy):
    t = np.arange(t0, t0 + n)
    return Trajectory(tid, np.column_stack([t, x0 + dx * (t - t0), y0 + dy * (t - t0)]))


class TestTrajectories:
    def test_validation(self):
        with pytest.raises(ValueError):
            Trajectory(0, [[0, 1, 1]])
        with pytest.raises(ValueError):
            Trajectory(0, [[1, 0, 0], [1, 1, 1]])

    def test_identical_link(self):
        a = line(0, 0, 10, 0, 0, 2, 0)
        assert cluster_trajectories([a, line(1, 0, 10, 0, 0, 2, 0)]) == [[0, 1]]

    def test_far_parallel_lines(self):
        a, b = line(0, 0, 10, 0, 0, 1, 0), line(1, 0, 10, 0, 1000, 1, 0)
        assert cluster_trajectories([a, b], ClusterParams(dist_thresh=10)) == [[0], [1]]

    def test_opposite_directions(self):
        assert not trajectories_linked(line(0, 0, 10, 0, 0, 3, 0), line(1, 0, 10, 30, 5, -3, 0), ClusterParams())

    def test_diverging_distance_fails_parallel_test(self):
        a, b = line(0, 0, 20, 0, 0, 3, 0), line(1, 0, 20, 0, 0, 3, 2)
        assert not trajectories_linked(a, b, ClusterParams(angle_thresh=1.0))

    def test_no_common_frames(self):
        assert not trajectories_linked(line(0, 0, 5, 0, 0, 1, 0), line(1, 10, 5, 0, 0, 1, 0), ClusterParams())

    def test_empty(self):
        with pytest.raises(ValueError):
            cluster_trajectories([])

    def test_twelve_trajectories_three_vehicles(self):
        rng = np.random.default_rng(0)
        trajs = []
        for v, (y, dx) in enumerate([(50, 4), (160, -5), (270, 6)]):
            for _ in range(4):
                ox, oy = rng.uniform(-20, 20, 2)
                trajs.append(line(len(trajs), 0, 15, 100 + ox, y + oy, dx, 0))
        params = ClusterParams()
        got = {frozenset(c) for c in cluster_trajectories(trajs, params)}
        expected = closure(len(trajs), lambda i, j: trajectories_linked(trajs[i], trajs[j], params))
        assert got == expected
        assert sorted(map(len, got)) == [4, 4, 4]

    def test_csv_round_trip(self, tmp_path):
        trajs = [line(3, 0, 4, 0.5, 1.25, 1, 0), line(7, 2, 3, 9, 9, 0, 1)]
        from charcorrect.traffic import write_trajectories_csv
        write_trajectories_csv(tmp_path / "t.csv", trajs)
        back = read_trajectories_csv(tmp_path / "t.csv")
        assert [t.id for t in back] == [3, 7]
        np.testing.assert_array_equal(back[0].points, trajs[0].points)

    def test_csv_bad_row(self, tmp_path):
        (tmp_path / "t.csv").write_text("t,id,x,y\n0,1,2,3\n1,1,x,3\n")
        with pytest.raises(ValueError, match=":3:"):
            read_trajectories_csv(tmp_path / "t.csv")


class TestBackground:
    def test_first_rule(self):
        m = BackgroundModel((1, 1))
        update_background(m, [[0.3]])
        assert m.H[0, 0] == 0.3 and m.C[0, 0] == 1

    def test_second_rule(self):
        m = BackgroundModel((1, 1))
        update_background(m, [[0.3]])
        update_background(m, [[0.7]])
        assert m.H[0, 0] == 0.3 and m.C[0, 0] == 0

    def test_constant_stream_saturates(self):
        m = BackgroundModel((2, 2), c_max=10)
        for _ in range(15):
            update_background(m, np.full((2, 2), 0.42))
        assert np.all(m.C == 10) and np.all(m.H == 0.42)

    def test_third_rule_refreshes_hue(self):
        m = BackgroundModel((1, 1), hue_tol=0.05)
        update_background(m, [[0.30]])
        update_background(m, [[0.32]])
        assert m.H[0, 0] == 0.32 and m.C[0, 0] == 2

    def test_moving_pixels_untouched(self):
        m = BackgroundModel((1, 2))
        update_background(m, [[0.3, 0.3]], moving=[[True, False]])
        assert m.C.tolist() == [[0, 1]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            update_background(BackgroundModel((2, 2)), np.zeros((3, 2)))

    def test_hue_wraps(self):
        assert hue_distance(0.98, 0.02) == pytest.approx(0.04)

    def test_counter_bounded_under_random_updates(self):
        rng = np.random.default_rng(0)
        m = BackgroundModel((10, 10), c_max=7, hue_tol=0.1)
        for _ in range(1000):  # 10^5 pixel updates
            hues = np.where(rng.random((10, 10)) < 0.7, 0.2, rng.random((10, 10)))
            update_background(m, hues, rng.random((10, 10)) < 0.2)
            assert m.C.min() >= 0 and m.C.max() <= 7

    def test_score_converged_and_foreign(self):
        m = BackgroundModel((4, 5))
        frame = np.full((4, 5), 0.1)
        update_background(m, frame)
        assert np.all(score_rect(m, frame, Rect(0, 0, 3, 4)) == -1)
        assert np.all(score_rect(m, np.full((4, 5), 0.6), Rect(0, 0, 3, 4)) == 1)

    def test_score_loop_oracle(self):
        rng = np.random.default_rng(2)
        m = BackgroundModel((6, 6), C=rng.integers(0, 3, (6, 6)), H=rng.random((6, 6)))
        frame = np.where(rng.random((6, 6)) < 0.5, m.H + 0.01, rng.random((6, 6)))
        rect = Rect(1, 2, 4, 5)
        got = score_rect(m, frame, rect)
        for r in range(1, 5):
            for c in range(2, 6):
                d = abs(frame[r, c] - m.H[r, c]) % 1.0
                bg = min(d, 1 - d) <= m.hue_tol and m.C[r, c] > 0
                assert got[r - 1, c - 2] == (-1 if bg else 1)

    def test_score_out_of_bounds(self):
        with pytest.raises(ValueError):
            score_rect(BackgroundModel((3, 3)), np.zeros((3, 3)), Rect(0, 0, 3, 2))


class TestPrefixSums:
    def test_ones(self):
        assert prefix_sums(np.ones((3, 3), dtype=int))[3, 3] == 9

    def test_single_cell(self):
        assert rect_sum(prefix_sums([[7]]), Rect(0, 0, 0, 0)) == 7

    def test_random_queries(self):
        rng = np.random.default_rng(0)
        g = rng.integers(-5, 6, (15, 20))
        S = prefix_sums(g)
        for _ in range(100):
            r0, r1 = sorted(rng.integers(0, 15, 2))
            c0, c1 = sorted(rng.integers(0, 20, 2))
            assert rect_sum(S, Rect(r0, c0, r1, c1)) == g[r0:r1 + 1, c0:c1 + 1].sum()

    def test_empty(self):
        with pytest.raises(ShapeError):
            prefix_sums(np.zeros((0, 3)))


class TestMaxSubrectangle:
    def test_all_positive(self):
        assert max_subrectangle(np.ones((3, 4), dtype=int)) == (Rect(0, 0, 2, 3), 12)

    def test_all_negative(self):
        assert max_subrectangle(-np.ones((3, 4), dtype=int)) == (Rect(0, 0, 0, 0), -1)

    def test_zero_padding_is_trimmed(self):
        g = np.zeros((4, 4), dtype=int)
        g[1, 2] = 3
        assert max_subrectangle(g) == (Rect(1, 2, 1, 2), 3)

    def test_exhaustive_oracle_500_grids(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            h, w = rng.integers(1, 13, 2)
            g = rng.choice([-1, 1], size=(h, w), p=[0.6, 0.4])
            assert max_subrectangle(g) == exhaustive_max_subrectangle(g)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_sum_dominates_every_cell(self, seed):
        g = np.random.default_rng(seed).integers(-9, 10, (6, 7))
        rect, value = max_subrectangle(g)
        assert value >= g.max()
        assert value == g[rect.row0:rect.row1 + 1, rect.col0:rect.col1 + 1].sum()


class TestMergeRects:
    def test_disjoint_unchanged(self):
        rects = [Rect(0, 0, 1, 1), Rect(5, 5, 6, 6)]
        assert merge_rects(rects) == [(rects[0], [0]), (rects[1], [1])]

    def test_chain(self):
        a, b, c = Rect(0, 0, 2, 2), Rect(2, 2, 4, 4), Rect(4, 4, 6, 6)
        assert not a.intersects(c)
        assert merge_rects([a, b, c]) == [(Rect(0, 0, 6, 6), [0, 1, 2])]

    @pytest.mark.parametrize("seed", range(10))
    def test_closure_oracle(self, seed):
        rng = np.random.default_rng(seed)
        rects = [random_rect(rng) for _ in range(50)]
        merged = merge_rects(rects)
        assert {frozenset(m) for _, m in merged} == closure(50, lambda i, j: rects[i].intersects(rects[j]))
        for box, members in merged:
            assert all(box.contains_point(rects[m].row0, rects[m].col0) for m in members)
        assert sorted(i for _, m in merged for i in m) == list(range(50))


class TestCounting:
    def test_empty_scene(self):
        assert count_vehicles([], [], Rect(0, 0, 1, 1)).count == 0

    def test_single_bundle(self):
        h, w = 60, 200
        frames = []
        trajs = [line(k, 3, 40, -20 + 2 * k, 28 + k, 6, 0) for k in range(3)]
        rng = np.random.default_rng(0)
        base = rng.uniform(0, 0.2, (h, w))
        for t in range(45):
            f = base.copy()
            if t >= 3:
                c = -20 + 6 * (t - 3) + 2
                c0, c1 = max(int(c - 20), 0), min(int(c + 20), w)
                if c0 < c1:
                    f[20:40, c0:c1] = 0.6
            frames.append(f)
        res = count_vehicles(trajs, frames, Rect(0, 90, h - 1, 110), CountParams(rect_height=40, rect_width=60))
        assert res.count == 1
        assert res.stamps[0].entry_frame < res.stamps[0].exit_frame

    def test_no_entry(self):
        frames = [np.zeros((40, 100))] * 10
        trajs = [line(0, 0, 10, 5, 20, 1, 0)]
        assert count_vehicles(trajs, frames, Rect(0, 80, 39, 99)).count == 0

    def test_synthetic_k5(self):
        scene = synthesize_scene(SceneParams(n_vehicles=5, seed=1))
        a = count_vehicles(scene.trajectories, scene.frames, scene.zone)
        b = count_vehicles(scene.trajectories, scene.frames, scene.zone)
        assert a.count == 5 and a.stamps == b.stamps

    def test_scene_round_trip(self, tmp_path):
        scene = synthesize_scene(SceneParams(n_vehicles=2, seed=3, width=200, lanes=1))
        write_scene(scene, tmp_path)
        back = read_scene(tmp_path)
        assert back.zone == scene.zone and back.true_count == 2
        assert len(back.frames) == len(scene.frames)
        np.testing.assert_array_equal(back.frames[4], scene.frames[4])
        assert [t.id for t in back.trajectories] == [t.id for t in scene.trajectories]
