import numpy as np
import pytest

from hierimit.geometry import IDENTITY_VEC7, Pose, yaw_quat
from hierimit.trajectory import (
    ArgumentError,
    Demonstration,
    Observation,
    ParseError,
    SubTaskLabel,
    ValidationError,
    build_rel_matrix,
    downsample,
    load_demos,
    save_demos,
    validate_demo,
    wire_float,
    wire_pose,
    wire_rel_matrix,
)


def random_world(rng, n):
    return [
        Pose(rng.uniform(-0.3, 0.3, size=3), rng.normal(size=4)) for _ in range(n)
    ]


def make_demo(rng, n=3, H=5, task="test", with_gt=False):
    frames = []
    poses = random_world(rng, n)
    labels = ("ee",) + tuple(f"obj{i}" for i in range(1, n))
    for t in range(H):
        poses = [
            wire_pose(Pose(p.position + rng.normal(0, 0.01, 3), p.orientation))
            for p in poses
        ]
        frames.append(
            Observation(
                end_effector=poses[0],
                labels=labels,
                rel=wire_rel_matrix(build_rel_matrix(poses)),
                timestamp=wire_float(float(t) * 0.1),
            )
        )
    gt = None
    if with_gt:
        gt = tuple(
            SubTaskLabel(int(rng.integers(0, n)), int(rng.integers(1, n)), int(rng.integers(t, H)))
            for t in range(H)
        )
    return Demonstration(frames=tuple(frames), task_id=task, ground_truth=gt)


class TestBuildRelMatrix:
    def test_all_identity_world(self):
        rel = build_rel_matrix([Pose.identity() for _ in range(3)])
        assert np.allclose(rel, np.broadcast_to(IDENTITY_VEC7, (3, 3, 7)), atol=1e-12)

    def test_two_object_translation(self):
        rel = build_rel_matrix([Pose(np.array([1.0, 0, 0])), Pose(np.zeros(3))])
        assert np.allclose(rel[0, 1][:3], [1, 0, 0], atol=1e-12)
        assert np.allclose(rel[1, 0][:3], [-1, 0, 0], atol=1e-12)

    def test_reconstruction_from_row(self):
        rng = np.random.default_rng(0)
        poses = random_world(rng, 4)
        rel = build_rel_matrix(poses)
        from hierimit.geometry import compose

        for i in range(4):
            recon = compose(poses[0], Pose.from_vec7(rel[i, 0]))
            assert recon.approx_equal(poses[i], tol=1e-9)

    def test_inverse_symmetry(self):
        rng = np.random.default_rng(1)
        rel = build_rel_matrix(random_world(rng, 4))
        from hierimit.geometry import inverse

        for i in range(4):
            for j in range(4):
                assert np.allclose(
                    inverse(Pose.from_vec7(rel[i, j])).vec7, rel[j, i], atol=1e-9
                )

    def test_needs_two_poses(self):
        with pytest.raises(ArgumentError):
            build_rel_matrix([Pose.identity()])


class TestWireFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        demos = [make_demo(rng, n=3, H=4, with_gt=True) for _ in range(3)]
        path = tmp_path / "demos.demo"
        save_demos(demos, path)
        loaded = load_demos(path)
        assert len(loaded) == 3
        for a, b in zip(demos, loaded):
            assert a.task_id == b.task_id
            assert a.ground_truth == b.ground_truth
            for fa, fb in zip(a.frames, b.frames):
                assert np.array_equal(fa.end_effector.vec7, fb.end_effector.vec7)
                assert np.array_equal(fa.rel, fb.rel)
                assert fa.timestamp == fb.timestamp

    def test_resave_byte_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        demo = make_demo(rng, with_gt=True)
        p1, p2 = tmp_path / "a.demo", tmp_path / "b.demo"
        save_demos([demo], p1)
        save_demos(load_demos(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_well_formed_two_frame_file(self, tmp_path):
        rng = np.random.default_rng(4)
        demo = make_demo(rng, n=2, H=2)
        path = tmp_path / "two.demo"
        save_demos([demo], path)
        assert load_demos(path)[0].horizon == 2

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        rng = np.random.default_rng(5)
        demo = make_demo(rng)
        path = tmp_path / "c.demo"
        save_demos([demo], path)
        text = path.read_text()
        lines = text.splitlines()
        lines.insert(1, "# a comment")
        lines.insert(0, "")
        path.write_text("\n".join(lines) + "\n")
        assert load_demos(path)[0].horizon == demo.horizon

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "bad.demo"
        path.write_text("task=x n=2 labels=ee,obj1\nnot_a_frame\n")
        with pytest.raises(ParseError, match="line 2"):
            load_demos(path)

    def test_bad_diagonal_rejected_with_frame(self, tmp_path):
        rng = np.random.default_rng(6)
        demo = make_demo(rng, n=2, H=2)
        path = tmp_path / "diag.demo"
        save_demos([demo], path)
        lines = path.read_text().splitlines()
        # corrupt rel[0][0] position of the second frame
        fields = lines[2].split()
        rel_idx = next(i for i, f in enumerate(fields) if f.startswith("rel="))
        vals = fields[rel_idx][4:].split(",")
        vals[0] = "0.5"
        fields[rel_idx] = "rel=" + ",".join(vals)
        lines[2] = " ".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match="frame 1"):
            load_demos(path)

    def test_frame_before_header_rejected(self, tmp_path):
        path = tmp_path / "nohdr.demo"
        path.write_text("t=0 ee=0,0,0,1,0,0,0 rel=0\n")
        with pytest.raises(ParseError):
            load_demos(path)

    def test_fuzz_random_valid_files(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(200):
            n = int(rng.integers(2, 4))
            H = int(rng.integers(2, 6))
            demo = make_demo(rng, n=n, H=H, with_gt=bool(rng.integers(0, 2)))
            path = tmp_path / f"fuzz_{i}.demo"
            save_demos([demo], path)
            loaded = load_demos(path)[0]
            validate_demo(loaded)
            assert loaded.horizon == H

    def test_pseudo_label_field_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        demo = make_demo(rng, with_gt=True)
        pl = tuple(SubTaskLabel(0, 1, t) for t in range(demo.horizon))
        demo2 = Demonstration(demo.frames, demo.task_id, demo.ground_truth, pl)
        path = tmp_path / "pl.demo"
        save_demos([demo2], path, label_field="both")
        loaded = load_demos(path)[0]
        assert loaded.pseudo_labels == pl
        assert loaded.ground_truth == demo.ground_truth


class TestValidation:
    def test_single_frame_rejected(self):
        rng = np.random.default_rng(9)
        demo = make_demo(rng, H=2)
        with pytest.raises(ValidationError):
            validate_demo(Demonstration(frames=demo.frames[:1], task_id="x"))

    def test_timestamps_must_increase(self):
        rng = np.random.default_rng(10)
        demo = make_demo(rng, H=3)
        frames = list(demo.frames)
        frames[2] = Observation(
            end_effector=frames[2].end_effector,
            labels=frames[2].labels,
            rel=frames[2].rel,
            timestamp=frames[0].timestamp,
        )
        with pytest.raises(ValidationError, match="timestamps"):
            validate_demo(Demonstration(frames=tuple(frames), task_id="x"))

    def test_gt_target_cannot_be_effector(self):
        rng = np.random.default_rng(11)
        demo = make_demo(rng, H=3)
        bad = tuple(SubTaskLabel(0, 0, t) for t in range(3))
        with pytest.raises(ValidationError, match="target"):
            validate_demo(Demonstration(demo.frames, "x", ground_truth=bad))


class TestDownsample:
    def test_identity_when_full_length(self):
        rng = np.random.default_rng(12)
        demo = make_demo(rng, H=6, with_gt=True)
        out = downsample(demo, 6)
        assert out.horizon == 6
        assert out.ground_truth == demo.ground_truth

    def test_keeps_endpoints(self):
        rng = np.random.default_rng(13)
        demo = make_demo(rng, H=10)
        out = downsample(demo, 2)
        assert out.horizon == 2
        assert out.frames[0].timestamp == demo.frames[0].timestamp
        assert out.frames[-1].timestamp == demo.frames[-1].timestamp

    def test_waypoints_stay_at_or_after_frame(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            demo = make_demo(rng, H=40, with_gt=True)
            out = downsample(demo, 17)
            for t, lab in enumerate(out.ground_truth):
                assert t <= lab.waypoint_frame < out.horizon

    def test_never_reorders_or_drops_last(self):
        rng = np.random.default_rng(15)
        demo = make_demo(rng, H=30)
        out = downsample(demo, 7)
        ts = [f.timestamp for f in out.frames]
        assert ts == sorted(ts)
        assert ts[-1] == demo.frames[-1].timestamp

    def test_range_checked(self):
        rng = np.random.default_rng(16)
        demo = make_demo(rng, H=5)
        with pytest.raises(ArgumentError):
            downsample(demo, 1)
        with pytest.raises(ArgumentError):
            downsample(demo, 6)
