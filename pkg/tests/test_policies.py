import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierimit.geometry import pose_delta_many
from hierimit.neural import no_grad
from hierimit.policies import (
    PolicyConfig,
    PolicyStack,
    estimate_step_scale,
    init_low_level,
    pair_mask,
    pair_table,
    prior_high_log_probs,
    prior_mid_log_probs,
    prior_tool_sequence,
    reach_log_density,
)
from hierimit.simworld import clip_delta, make_spec, scripted_expert
from hierimit.trajectory import EE_INDEX, downsample


@pytest.fixture(scope="module")
def stacking_demos():
    spec = make_spec("stacking_a")
    return [downsample(scripted_expert(spec, seed=s), 50) for s in range(4)]


@pytest.fixture(scope="module")
def small_stack():
    return PolicyStack(4, PolicyConfig(), seed=0)


class TestPriorHigh:
    def test_paper_values_for_four_objects(self):
        lp = prior_high_log_probs(2, 4, 0.95)
        assert np.exp(lp[2]) == pytest.approx(0.95, abs=1e-12)
        assert np.exp(lp[1]) == pytest.approx(0.025, abs=1e-12)
        assert np.exp(lp[3]) == pytest.approx(0.025, abs=1e-12)

    def test_effector_excluded(self):
        lp = prior_high_log_probs(1, 5, 0.9)
        assert lp[EE_INDEX] == -np.inf

    def test_normalizes(self):
        for n in (3, 4, 6):
            for prev in list(range(1, n)) + [None]:
                lp = prior_high_log_probs(prev, n, 0.95)
                assert abs(np.exp(lp[1:]).sum() - 1.0) < 1e-9

    def test_uniform_at_start(self):
        lp = prior_high_log_probs(None, 4, 0.95)
        assert np.allclose(np.exp(lp[1:]), 1.0 / 3.0, atol=1e-12)

    def test_symmetric_over_non_previous_targets(self):
        lp = prior_high_log_probs(3, 6, 0.92)
        others = [np.exp(lp[i]) for i in range(1, 6) if i != 3]
        assert np.allclose(others, others[0], atol=1e-15)

    def test_small_n_rejected(self):
        with pytest.raises(ValueError):
            prior_high_log_probs(1, 2, 0.95)


class TestPriorMid:
    def test_candidates_before_t_rejected(self):
        with pytest.raises(ValueError):
            prior_mid_log_probs(np.zeros(3), np.array([4, 5, 6]), 5, 100.0, 0.95)

    def test_normalizes(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            H = int(rng.integers(3, 40))
            t = int(rng.integers(0, H))
            ks = np.arange(t, H)
            norms = rng.uniform(0, 0.5, size=len(ks))
            lp = prior_mid_log_probs(norms, ks, t, 100.0, 0.95)
            assert abs(np.exp(lp).sum() - 1.0) < 1e-9

    def test_single_candidate_gets_everything(self):
        lp = prior_mid_log_probs(np.array([0.3]), np.array([7]), 7, 0.0, 0.95)
        assert abs(lp[0]) < 1e-12

    def test_monotone_in_norm_within_category(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            ks = np.arange(3, 20)
            norms = rng.uniform(0, 0.4, size=len(ks))
            lp = prior_mid_log_probs(norms, ks, 3, 100.0, 0.95)
            future = ks > 3
            order = np.argsort(norms[future])
            probs = lp[future][order]
            assert np.all(np.diff(probs) <= 1e-12)

    def test_documented_category_weights(self):
        # equal norms: k=t carries beta, the future shares  1-beta uniformly
        ks = np.arange(5, 10)
        lp = prior_mid_log_probs(np.zeros(5), ks, 5, 100.0, 0.95)
        probs = np.exp(lp)
        assert probs[0] == pytest.approx(0.95, abs=1e-12)
        assert np.allclose(probs[1:], 0.05 / 4.0, atol=1e-12)


class TestPriorTool:
    def test_static_scene_selects_effector(self, stacking_demos):
        demo = stacking_demos[0]
        tools = prior_tool_sequence(demo)
        gt_tools = np.array([l.tool for l in demo.ground_truth])
        ee_frames = gt_tools == EE_INDEX
        # prior should agree on nearly all pure-effector frames
        assert (tools[ee_frames] == EE_INDEX).mean() > 0.9

    def test_moving_block_selected(self, stacking_demos):
        demo = stacking_demos[0]
        tools = prior_tool_sequence(demo)
        gt_tools = np.array([l.tool for l in demo.ground_truth])
        changes = np.nonzero(np.diff(gt_tools) != 0)[0]
        mask = np.ones(len(gt_tools), bool)
        for c in changes:
            mask[max(0, c - 1) : c + 3] = False
        assert (tools[mask] == gt_tools[mask]).mean() >= 0.85


class TestPairSupport:
    def test_pair_table_excludes_effector_target_and_self(self):
        for n in (3, 4, 5):
            pairs = pair_table(n)
            assert len(pairs) == (n - 1) ** 2
            for tool, targ in pairs:
                assert targ != EE_INDEX
                assert targ != tool
        mask = pair_mask(4)
        assert mask.sum() == 9

    def test_high_forward_masks_and_normalizes(self, small_stack):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(3, small_stack.z_width))
        mem = rng.normal(size=(3, 32))
        g = rng.normal(size=(3, 7))
        with no_grad():
            tool_lp, targ_lp = small_stack.high_forward(z, mem, g)
        assert np.all(targ_lp.data[:, EE_INDEX] == -np.inf)
        assert np.allclose(np.exp(tool_lp.data).sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(np.exp(targ_lp.data[:, 1:]).sum(axis=1), 1.0, atol=1e-9)
        joint = small_stack.pair_log_probs(z, mem, g)
        assert np.all(joint[:, :, EE_INDEX] == -np.inf)
        assert np.all(np.isneginf(np.diagonal(joint, axis1=1, axis2=2)))
        total = np.exp(joint[np.isfinite(joint)]).reshape(3, -1).sum(axis=1)
        assert np.allclose(total, 1.0, atol=1e-9)

    def test_zeroed_heads_give_uniform(self):
        stack = PolicyStack(4, PolicyConfig(), seed=1)
        stack.store["high_tool.W"].data[:] = 0.0
        stack.store["high_tool.b"].data[:] = 0.0
        stack.store["high_target.W"].data[:] = 0.0
        stack.store["high_target.b"].data[:] = 0.0
        rng = np.random.default_rng(3)
        joint = stack.pair_log_probs(
            rng.normal(size=(1, stack.z_width)), rng.normal(size=(1, 32)), rng.normal(size=(1, 7))
        )
        finite = joint[np.isfinite(joint)]
        assert np.allclose(np.exp(finite), 1.0 / 9.0, atol=1e-9)


class TestMidForward:
    def test_output_quaternion_unit_and_canonical(self, small_stack):
        rng = np.random.default_rng(4)
        with no_grad():
            out = small_stack.mid_forward(
                rng.normal(size=(20, 32)),
                rng.normal(size=(20, 7)),
                rng.normal(size=(20, 7)),
                rng.integers(0, 4, size=20),
                rng.integers(1, 4, size=20),
            )
        quat = out.data[:, 3:]
        assert np.allclose(np.linalg.norm(quat, axis=1), 1.0, atol=1e-9)
        assert np.all(quat[:, 0] >= 0.0)

    def test_zeroed_final_layer_predicts_identity(self):
        stack = PolicyStack(4, PolicyConfig(), seed=2)
        stack.store["mid.2.W"].data[:] = 0.0
        stack.store["mid.2.b"].data[:] = 0.0
        rng = np.random.default_rng(5)
        with no_grad():
            out = stack.mid_forward(
                rng.normal(size=(4, 32)), rng.normal(size=(4, 7)),
                rng.normal(size=(4, 7)), [0, 1, 2, 3], [1, 2, 3, 1],
            )
        assert np.allclose(out.data[:, :3], 0.0, atol=1e-12)
        assert np.allclose(out.data[:, 3], 1.0, atol=1e-12)


class TestHistoryEncoding:
    def test_pure_function_of_label_sequence(self, small_stack):
        tools = np.array([0, 0, 2, 2])
        targs = np.array([2, 2, 1, 1])
        ws = np.linspace(0, 1, 28).reshape(4, 7)
        with no_grad():
            a = small_stack.memory_one_step(tools, targs, ws)
            b = small_stack.memory_one_step(tools, targs, ws)
        assert np.array_equal(a.data, b.data)


class TestReachModel:
    def test_zero_at_waypoint(self):
        rel = np.zeros(7)
        rel[3] = 1.0
        val = reach_log_density(np.zeros(7), rel, rel, 0.05, 0.01)
        assert val == pytest.approx(7 * (-np.log(0.01) - 0.5 * np.log(2 * np.pi)))

    def test_clips_long_steps(self):
        rel = np.zeros(7); rel[3] = 1.0
        way = rel.copy(); way[0] = 1.0
        step = np.zeros(7); step[0] = 0.05
        far = reach_log_density(step, rel, way, 0.05, 0.01)
        unclipped = reach_log_density(np.array([1, 0, 0, 0, 0, 0, 0.0]), rel, way, 0.05, 0.01)
        assert far > unclipped

    def test_estimate_step_scale(self, stacking_demos):
        scale = estimate_step_scale(stacking_demos)
        assert 0.005 < scale < 0.05


class TestInitLowLevel:
    def test_rejects_empty(self, small_stack):
        with pytest.raises(ValueError):
            init_low_level(small_stack, [])

    def test_loss_decreases_and_reaches_oracle_direction(self, stacking_demos):
        stack = PolicyStack(4, PolicyConfig(), seed=3)
        losses = init_low_level(stack, stacking_demos[:3], iterations=400, batch=384, seed=0)
        assert np.mean(losses[-20:]) < np.mean(losses[:20]) - 1.0
        assert np.mean(losses[100:]) <= np.mean(losses[:100])

        held_out = stacking_demos[3]
        rel = held_out.rel_stack()
        H = rel.shape[0]
        rng = np.random.default_rng(7)
        cap = estimate_step_scale(stacking_demos[:3])
        cosines = []
        for _ in range(300):
            t = int(rng.integers(0, H - 1))
            k = int(rng.integers(t, H))
            tool = int(rng.integers(0, 4))
            targ = int(rng.integers(1, 4))
            r, w = rel[t, tool, targ], rel[k, tool, targ]
            oracle = clip_delta(pose_delta_many(w, r), cap)
            if np.linalg.norm(oracle) < 1e-3:
                continue
            with no_grad():
                mean, _ = stack.low_forward(r[None], w[None], [tool], [targ])
            m = mean.data[0]
            cosines.append(
                float(oracle @ m) / (np.linalg.norm(oracle) * np.linalg.norm(m) + 1e-12)
            )
        assert np.mean(cosines) >= 0.9

    def test_goal_reached_means_small_action(self, stacking_demos):
        stack = PolicyStack(4, PolicyConfig(), seed=4)
        init_low_level(stack, stacking_demos[:3], iterations=400, batch=384, seed=1)
        rel = stacking_demos[0].rel_stack()
        rng = np.random.default_rng(8)
        norms = []
        for _ in range(50):
            t = int(rng.integers(0, rel.shape[0]))
            tool = int(rng.integers(0, 4))
            targ = int(rng.integers(1, 4))
            r = rel[t, tool, targ]
            with no_grad():
                mean, _ = stack.low_forward(r[None], r[None], [tool], [targ])
            norms.append(np.linalg.norm(mean.data[0][:3]))
        assert np.mean(norms) < 0.1 * 0.05

    def test_oracle_action_beats_reversed_action(self, stacking_demos):
        stack = PolicyStack(4, PolicyConfig(), seed=5)
        init_low_level(stack, stacking_demos[:3], iterations=400, batch=384, seed=2)
        rel = stacking_demos[0].rel_stack()
        rng = np.random.default_rng(9)
        cap = estimate_step_scale(stacking_demos[:3])
        wins = 0
        trials = 0
        for _ in range(200):
            t = int(rng.integers(0, rel.shape[0] - 1))
            k = int(rng.integers(t, rel.shape[0]))
            tool = int(rng.integers(0, 4))
            targ = int(rng.integers(1, 4))
            r, w = rel[t, tool, targ], rel[k, tool, targ]
            oracle = clip_delta(pose_delta_many(w, r), cap)
            if np.linalg.norm(oracle) < 1e-3:
                continue
            with no_grad():
                good = stack.low_logpdf(oracle[None], r[None], w[None], [tool], [targ]).data[0]
                bad = stack.low_logpdf(-oracle[None], r[None], w[None], [tool], [targ]).data[0]
            trials += 1
            wins += good > bad
        assert wins / trials >= 0.95


class TestCheckpointing:
    def test_stack_round_trip(self, tmp_path, small_stack):
        path = tmp_path / "stack.ckpt"
        small_stack.save(path)
        loaded = PolicyStack.load(path)
        assert loaded.n == small_stack.n
        rng = np.random.default_rng(10)
        z = rng.normal(size=(2, small_stack.z_width))
        mem = rng.normal(size=(2, 32))
        g = rng.normal(size=(2, 7))
        assert np.array_equal(
            small_stack.pair_log_probs(z, mem, g), loaded.pair_log_probs(z, mem, g)
        )
