"""Closed-loop evaluation tests: pose unrolling against a transform-chain
oracle, the separating-axis test against dense point sampling, the bearing
taxonomy, first-contact event semantics, and report arithmetic."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssntraj.errors import UsageError
from ssntraj.evaluation import (CollisionReport, METERS_PER_MILE, classify_collision, evaluate,
                                report_row, unroll_closed_loop, write_report_csv, read_report_csv)
from ssntraj.geometry import Obb, obb_overlap, obb_separation_margin, rot2d, wrap_angle
from ssntraj.network import TrajectoryPrediction
from ssntraj.scenes import EGO_EXTENT, RasterConfig
from tests.test_scenes import make_manual_dataset


class FixedCommandModel:
    """Stub policy: always emit the same first waypoint."""

    def __init__(self, dx, dy=0.0, dyaw=0.0):
        self.wp = np.array([[dx, dy, dyaw]])

    def predict(self, raster):
        return TrajectoryPrediction(self.wp)


class ZeroModel(FixedCommandModel):
    def __init__(self):
        super().__init__(0.0, 0.0, 0.0)


class TestObbOverlap:
    def test_identical_boxes(self):
        a = Obb(1.0, 2.0, 0.4, 4.0, 2.0)
        assert obb_overlap(a, a)

    def test_distant_boxes(self):
        assert not obb_overlap(Obb(0, 0, 0, 1, 1), Obb(10, 0, 0, 1, 1))

    def test_touching_edges_count(self):
        assert obb_overlap(Obb(0, 0, 0, 2, 2), Obb(2.0, 0, 0, 2, 2))

    def test_symmetry_and_rigid_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = Obb(*rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi),
                    rng.uniform(0.5, 4), rng.uniform(0.5, 3))
            b = Obb(*rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi),
                    rng.uniform(0.5, 4), rng.uniform(0.5, 3))
            assert obb_overlap(a, b) == obb_overlap(b, a)
            ang = rng.uniform(-np.pi, np.pi)
            t = rng.uniform(-50, 50, 2)
            rot = rot2d(ang)

            def moved(box):
                c = rot @ np.array([box.cx, box.cy]) + t
                return Obb(c[0], c[1], box.yaw + ang, box.length, box.width)

            assert obb_overlap(a, b) == obb_overlap(moved(a), moved(b))

    def _sampling_oracle(self, a: Obb, b: Obb, n=200) -> bool:
        """Dense grid of points inside each box tested against the other."""
        for src, dst in ((a, b), (b, a)):
            u, v = src.axes()
            ls = np.linspace(-0.5 * src.length, 0.5 * src.length, n)
            ws = np.linspace(-0.5 * src.width, 0.5 * src.width, n)
            pts = (np.array([src.cx, src.cy])
                   + ls[:, None, None] * u + ws[None, :, None] * v).reshape(-1, 2)
            d = pts - np.array([dst.cx, dst.cy])
            du, dv = dst.axes()
            inside = (np.abs(d @ du) <= 0.5 * dst.length) & (np.abs(d @ dv) <= 0.5 * dst.width)
            if inside.any():
                return True
        return False

    def test_against_dense_sampling_oracle_1000_pairs(self):
        rng = np.random.default_rng(2024)
        disagreements = 0
        for _ in range(1000):
            a = Obb(*rng.uniform(-4, 4, 2), rng.uniform(-np.pi, np.pi),
                    rng.uniform(0.5, 5), rng.uniform(0.5, 2.5))
            b = Obb(*rng.uniform(-4, 4, 2), rng.uniform(-np.pi, np.pi),
                    rng.uniform(0.5, 5), rng.uniform(0.5, 2.5))
            sat = obb_overlap(a, b)
            oracle = self._sampling_oracle(a, b)
            if sat != oracle and abs(obb_separation_margin(a, b)) > 1e-6:
                disagreements += 1
        assert disagreements == 0


class TestClassifyCollision:
    def _overlapping_other(self, theta, dist=2.0):
        return Obb(dist * np.cos(theta), dist * np.sin(theta), 0.0, 4.0, 2.0)

    def test_dead_ahead_is_front(self):
        cat, theta = classify_collision((0, 0, 0), self._overlapping_other(0.0))
        assert cat == "front" and theta == pytest.approx(0.0)

    def test_dead_behind_is_rear(self):
        cat, theta = classify_collision((0, 0, 0), self._overlapping_other(np.pi))
        assert cat == "rear" and abs(theta) == pytest.approx(np.pi)

    def test_abeam_is_side(self):
        cat, theta = classify_collision((0, 0, 0), self._overlapping_other(np.pi / 2, dist=1.4))
        assert cat == "side" and theta == pytest.approx(np.pi / 2)

    def test_boundaries_inclusive_toward_front_rear(self):
        cat, _ = classify_collision((0, 0, 0), self._overlapping_other(np.pi / 4, dist=1.8))
        assert cat == "front"
        cat, _ = classify_collision((0, 0, 0), self._overlapping_other(3 * np.pi / 4, dist=1.8))
        assert cat == "rear"

    def test_bearing_uses_ego_heading(self):
        # other ahead in world but ego faces away: rear
        other = Obb(2.0, 0.0, 0.0, 4.0, 2.0)
        cat, _ = classify_collision((0, 0, np.pi), other)
        assert cat == "rear"

    def test_non_overlapping_is_usage_error(self):
        with pytest.raises(UsageError):
            classify_collision((0, 0, 0), Obb(50, 0, 0, 1, 1))

    @given(st.floats(-np.pi, np.pi))
    @settings(max_examples=100, deadline=None)
    def test_partition_covers_all_bearings(self, theta):
        cat, _ = classify_collision((0, 0, 0), self._overlapping_other(theta, dist=1.0))
        a = abs(wrap_angle(theta))
        if a <= np.pi / 4:
            assert cat == "front"
        elif a >= 3 * np.pi / 4:
            assert cat == "rear"
        else:
            assert cat == "side"


class TestUnroll:
    def test_zero_model_fixpoint(self):
        ds = make_manual_dataset(n_frames=6, start_pose=(4.0, -1.0, 0.3))
        poses = unroll_closed_loop(ZeroModel(), ds, ds.scenes[0], RasterConfig())
        assert np.array_equal(poses, np.tile(ds.frames[0].ego_pose, (6, 1)))

    def test_unit_advance_along_heading(self):
        ds = make_manual_dataset(n_frames=5, start_pose=(0.0, 0.0, np.pi / 2))
        poses = unroll_closed_loop(FixedCommandModel(1.0), ds, ds.scenes[0], RasterConfig())
        for t in range(5):
            assert poses[t, 0] == pytest.approx(0.0, abs=1e-12)
            assert poses[t, 1] == pytest.approx(t)

    def test_curved_command_chain_against_transform_oracle(self):
        ds = make_manual_dataset(n_frames=12, start_pose=(3.0, 7.0, -0.8))
        step = (0.9, -0.07, 0.05)
        poses = unroll_closed_loop(FixedCommandModel(*step), ds, ds.scenes[0], RasterConfig())

        def mat(x, y, yaw):
            return np.array([[np.cos(yaw), -np.sin(yaw), x],
                             [np.sin(yaw), np.cos(yaw), y],
                             [0, 0, 1]])
        m = mat(3.0, 7.0, -0.8)
        for t in range(12):
            assert np.abs(poses[t, :2] - m[:2, 2]).max() < 1e-9
            assert abs(wrap_angle(poses[t, 2] - np.arctan2(m[1, 0], m[0, 0]))) < 1e-9
            m = m @ mat(*step)


class TestEvaluate:
    def test_zero_model_far_agents_no_collisions(self):
        ds = make_manual_dataset(n_frames=10, agents=[(40.0, 40.0, 0.0, 4.0, 2.0)])
        report, events = evaluate(ZeroModel(), ds, RasterConfig())
        assert report.total == 0 and events == []
        assert report.frames == 10
        assert report.total_per_1000mi is None  # motionless ego guard

    def test_two_frame_front_impact(self):
        # bumper gap is 2.75 m (agent rear face 5.0, ego front face 2.25);
        # a 3 m lunge guarantees contact on the second frame
        ds = make_manual_dataset(n_frames=2, agents=[(7.0, 0.0, 0.0, 4.0, 2.0)],
                                 start_pose=(0.0, 0.0, 0.0))
        report, events = evaluate(FixedCommandModel(3.0), ds, RasterConfig())
        assert report.frames == 2
        assert len(events) == 1
        assert events[0].category == "front"
        assert report.front == 1 and report.side == 0 and report.rear == 0
        assert report.rate_10k("front") == pytest.approx(5000.0)

    def test_first_contact_reemitted_after_separation(self):
        # drive fully through a thin wall, separate beyond it, reverse back:
        # overlap holds while |x - 4| <= 2.5, so x = 9 separates the episodes
        ds = make_manual_dataset(n_frames=9, agents=[(4.0, 0.0, 0.0, 0.5, 6.0)])
        seq = [3.0, 3.0, 3.0, -3.0, -3.0, -3.0, 0.0, 0.0]

        class Scripted:
            def __init__(self):
                self.i = 0

            def predict(self, raster):
                dx = seq[min(self.i, len(seq) - 1)]
                self.i += 1
                return TrajectoryPrediction(np.array([[dx, 0.0, 0.0]]))

        report, events = evaluate(Scripted(), ds, RasterConfig())
        hits = [e for e in events if e.track_id == 0]
        assert len(hits) == 2  # one per overlap episode
        assert hits[0].category == "front" and hits[1].category == "rear"

    def test_rate_arithmetic_174_per_10k_miles(self):
        report = CollisionReport(front=100, side=50, rear=24, frames=1,
                                 meters=10_000 * METERS_PER_MILE)
        assert report.total == 174
        assert report.total_per_1000mi == pytest.approx(17.4)

    def test_duplicating_scenes_keeps_rates_fixed(self):
        ds = make_manual_dataset(n_frames=4, agents=[(6.5, 0.0, 0.0, 4.0, 2.0)])
        model = FixedCommandModel(1.5)
        r1, _ = evaluate(model, ds, RasterConfig())
        # duplicate the scene
        from ssntraj.scenes import Dataset, Scene, Frame, Agent
        dup = Dataset()
        n = len(ds.frames)
        for k in range(2):
            dup.scenes.append(Scene(scene_id=k, host="host-00",
                                    frame_start_index=k * n, frame_end_index=(k + 1) * n))
            for fr in ds.frames:
                dup.frames.append(Frame(timestamp=fr.timestamp + k * 100.0,
                                        ego_pose=fr.ego_pose.copy(),
                                        agent_start_index=fr.agent_start_index + k * len(ds.agents),
                                        agent_end_index=fr.agent_end_index + k * len(ds.agents)))
            for a in ds.agents:
                dup.agents.append(Agent(track_id=a.track_id, centroid=a.centroid.copy(), yaw=a.yaw,
                                        extent=a.extent, velocity=a.velocity, label=a.label))
        r2, _ = evaluate(model, dup, RasterConfig())
        assert r2.total == 2 * r1.total
        assert r2.frames == 2 * r1.frames
        for cat in ("front", "side", "rear"):
            assert r2.rate_10k(cat) == r1.rate_10k(cat)

    def test_thread_fanout_matches_serial(self, monkeypatch):
        ds = make_manual_dataset(n_frames=6, agents=[(6.5, 0.0, 0.0, 4.0, 2.0)])
        model = FixedCommandModel(1.5)
        serial, ev1 = evaluate(model, ds, RasterConfig())
        monkeypatch.setenv("SSN_THREADS", "4")
        threaded, ev2 = evaluate(model, ds, RasterConfig())
        assert (serial.front, serial.side, serial.rear) == (threaded.front, threaded.side, threaded.rear)
        assert [(e.scene_id, e.frame_index) for e in ev1] == [(e.scene_id, e.frame_index) for e in ev2]


class TestReportCsv:
    def test_row_format_and_round_trip(self, tmp_path):
        report = CollisionReport(front=2, side=1, rear=0, frames=500, meters=1800.0)
        path = tmp_path / "report.csv"
        write_report_csv(path, [("trained", report), ("random", report)])
        text = path.read_text().splitlines()
        assert text[0] == "model,front_10k,side_10k,rear_10k,total_per_1000mi,frames,meters"
        rows = read_report_csv(path)
        assert rows[0]["model"] == "trained"
        assert rows[0]["front_10k"] == pytest.approx(40.0)
        assert rows[0]["frames"] == 500

    def test_motionless_report_has_empty_mile_rate(self):
        report = CollisionReport(front=1, frames=10, meters=0.0)
        row = report_row("s", report)
        assert row.split(",")[4] == ""
