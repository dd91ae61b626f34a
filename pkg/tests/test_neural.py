import numpy as np
import pytest

from hierimit.neural import (
    Dense,
    Embedding,
    IndexOutOfRange,
    LstmCell,
    MLP,
    ParamStore,
    ShapeMismatch,
    Tensor,
    concat,
    gaussian_logpdf,
    log_softmax,
    lstm_unroll,
    mse,
    no_grad,
    softmax_ce,
    square,
    take_rows,
    tmean,
    tsum,
)

FD_H = 1e-5
FD_TOL = 1e-4


def finite_diff_check(store, run, rng, samples=30, tol=FD_TOL):
    """Central finite differences against analytic grads on sampled params."""
    store.zero_grad()
    run().backward()
    worst = 0.0
    for name, p in store.params.items():
        g = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.data.size)
        flat = p.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + FD_H
            with no_grad():
                lp = run().item()
            flat[i] = old - FD_H
            with no_grad():
                lm = run().item()
            flat[i] = old
            fd = (lp - lm) / (2 * FD_H)
            denom = max(1e-6, abs(fd), abs(g[i]))
            worst = max(worst, abs(fd - g[i]) / denom)
    assert worst < tol, f"max relative gradient error {worst}"
    return worst


class TestDense:
    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        layer = Dense(store, "d", 4, 3, rng)
        layer.W.data[:] = 0.0
        layer.b.data[:] = 0.0
        out = layer(Tensor(rng.normal(size=(2, 4))))
        assert np.all(out.data == 0.0)

    def test_relu_gates_identity_weights(self):
        rng = np.random.default_rng(1)
        store = ParamStore()
        layer = Dense(store, "d", 2, 2, rng, activation="relu")
        layer.W.data[:] = np.eye(2)
        layer.b.data[:] = 0.0
        out = layer(Tensor(np.array([-1.0, 2.0])))
        assert np.allclose(out.data, [0.0, 2.0])

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        store = ParamStore()
        layer = Dense(store, "d", 4, 3, rng)
        with pytest.raises(ShapeMismatch):
            layer(Tensor(np.zeros((2, 5))))

    @pytest.mark.parametrize("seed", range(8))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        net = MLP(store, "m", [5, 8, 3], rng)
        x = rng.normal(size=(4, 5))
        y = rng.normal(size=(4, 3))
        finite_diff_check(store, lambda: mse(net(Tensor(x)), y), rng)


class TestLstm:
    def test_zero_weights_zero_hidden(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        cell = LstmCell(store, "l", 3, 4, rng)
        for name in ("l.Wx", "l.Wh", "l.b"):
            store[name].data[:] = 0.0
        state = cell.zero_state()
        _, h = cell(state, Tensor(rng.normal(size=3)))
        assert np.all(h.data == 0.0)

    def test_saturated_gates_accumulate_candidate(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        cell = LstmCell(store, "l", 2, 2, rng)
        store["l.Wx"].data[:] = 0.0
        store["l.Wh"].data[:] = 0.0
        bias = np.zeros(8)
        bias[0:2] = 50.0   # input gate open
        bias[2:4] = 50.0   # forget gate open
        bias[4:6] = 1.0    # candidate tanh(1)
        bias[6:8] = 50.0   # output gate open
        store["l.b"].data[:] = bias
        state = cell.zero_state()
        expected_c = 0.0
        for step in range(1, 4):
            state, h = cell(state, Tensor(np.zeros(2)))
            expected_c += np.tanh(1.0)
            assert np.allclose(state[1].data, expected_c, atol=1e-9)
            assert np.allclose(h.data, np.tanh(expected_c), atol=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_unrolled_gradients(self, seed):
        rng = np.random.default_rng(seed + 10)
        store = ParamStore()
        cell = LstmCell(store, "l", 3, 4, rng)
        xs = [rng.normal(size=(2, 3)) for _ in range(5)]
        w = rng.normal(size=(2, 20))

        def run():
            outs = lstm_unroll(cell, [Tensor(x) for x in xs])
            return tsum(concat(outs, axis=-1) * w)

        finite_diff_check(store, run, rng)

    def test_gradient_flows_to_first_input(self):
        rng = np.random.default_rng(20)
        store = ParamStore()
        cell = LstmCell(store, "l", 3, 4, rng)
        xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(5)]
        w = rng.normal(size=(2, 20))
        tsum(concat(lstm_unroll(cell, xs), axis=-1) * w).backward()
        g = xs[0].grad
        x0 = xs[0].data.copy()
        worst = 0.0
        for r in range(2):
            for c in range(3):
                xs[0].data[r, c] = x0[r, c] + FD_H
                with no_grad():
                    lp = tsum(concat(lstm_unroll(cell, xs), axis=-1) * w).item()
                xs[0].data[r, c] = x0[r, c] - FD_H
                with no_grad():
                    lm = tsum(concat(lstm_unroll(cell, xs), axis=-1) * w).item()
                xs[0].data[r, c] = x0[r, c]
                fd = (lp - lm) / (2 * FD_H)
                worst = max(worst, abs(fd - g[r, c]) / max(1e-6, abs(fd)))
        assert worst < FD_TOL


class TestSoftmaxCe:
    def test_uniform_logits_give_log_k(self):
        for k in (2, 5, 9):
            loss = softmax_ce(Tensor(np.zeros(k)), 0)
            assert abs(loss.item() - np.log(k)) < 1e-12

    def test_loss_decreases_as_true_logit_grows(self):
        prev = np.inf
        for boost in (0.0, 1.0, 5.0, 20.0):
            logits = np.zeros(4)
            logits[2] = boost
            loss = softmax_ce(Tensor(logits), 2).item()
            assert loss < prev
            prev = loss
        assert prev < 1e-8

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=6), requires_grad=True)
        softmax_ce(logits, 3).backward()
        sm = np.exp(logits.data - logits.data.max())
        sm /= sm.sum()
        onehot = np.eye(6)[3]
        assert np.allclose(logits.grad, sm - onehot, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        vals = rng.normal(size=7)
        logits = Tensor(vals.copy(), requires_grad=True)
        softmax_ce(logits, 2).backward()
        for i in range(7):
            bumped = vals.copy()
            bumped[i] += FD_H
            lp = softmax_ce(Tensor(bumped), 2).item()
            bumped[i] -= 2 * FD_H
            lm = softmax_ce(Tensor(bumped), 2).item()
            fd = (lp - lm) / (2 * FD_H)
            assert abs(fd - logits.grad[i]) < 1e-6

    def test_index_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            softmax_ce(Tensor(np.zeros(3)), 5)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            logp = log_softmax(Tensor(rng.normal(size=9) * 5))
            assert abs(np.exp(logp.data).sum() - 1.0) < 1e-12

    def test_ce_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            loss = softmax_ce(Tensor(rng.normal(size=5) * 3), int(rng.integers(5)))
            assert loss.item() >= 0.0


class TestGaussianLogpdf:
    def test_at_mean_with_unit_std(self):
        x = np.zeros(7)
        val = gaussian_logpdf(x, Tensor(np.zeros(7)), Tensor(np.zeros(7))).item()
        assert abs(val - 7 * (-0.5 * np.log(2 * np.pi))) < 1e-12

    def test_translation_invariance(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=7)
        mean = rng.normal(size=7)
        shift = rng.normal(size=7)
        a = gaussian_logpdf(x, Tensor(mean), Tensor(np.zeros(7))).item()
        b = gaussian_logpdf(x + shift, Tensor(mean + shift), Tensor(np.zeros(7))).item()
        assert abs(a - b) < 1e-9

    def test_doubling_std_at_mean_costs_seven_log_two(self):
        x = np.zeros(7)
        a = gaussian_logpdf(x, Tensor(np.zeros(7)), Tensor(np.zeros(7))).item()
        b = gaussian_logpdf(x, Tensor(np.zeros(7)), Tensor(np.full(7, np.log(2.0)))).item()
        assert abs((a - b) - 7 * np.log(2.0)) < 1e-12

    def test_maximized_at_mean(self):
        mean = np.linspace(-1, 1, 7)
        best = gaussian_logpdf(mean, Tensor(mean), Tensor(np.zeros(7))).item()
        for offset in np.linspace(-0.5, 0.5, 11):
            if offset == 0.0:
                continue
            val = gaussian_logpdf(mean + offset, Tensor(mean), Tensor(np.zeros(7))).item()
            assert val < best


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0, 2.0]))
        store.adam_step(lr=0.1)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_constant_gradient_step_approaches_lr(self):
        store = ParamStore()
        p = store.add("p", np.array([0.0]))
        lr = 1e-3
        moves = []
        for _ in range(200):
            before = p.data.copy()
            p.grad = np.array([3.7])
            store.adam_step(lr, clip_norm=0.0)
            moves.append(abs(p.data[0] - before[0]))
        assert abs(moves[-1] - lr) < 1e-5

    def test_two_hand_computed_steps(self):
        store = ParamStore()
        p = store.add("p", np.array([0.5]))
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        theta, m, v = 0.5, 0.0, 0.0
        for step, g in ((1, 0.3), (2, -0.2)):
            p.grad = np.array([g])
            store.adam_step(lr, clip_norm=0.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
            assert abs(p.data[0] - theta) < 1e-12

    def test_gradients_zeroed_after_step(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0]))
        p.grad = np.array([1.0])
        store.adam_step(0.01)
        assert p.grad is None

    def test_clipping_by_global_norm(self):
        store = ParamStore()
        p = store.add("p", np.zeros(4))
        p.grad = np.full(4, 100.0)
        assert store.grad_norm() == pytest.approx(200.0)
        store.adam_step(1e-3, clip_norm=5.0)  # no blow-up, just bounded moments
        assert np.all(np.abs(store._m["p"]) <= 0.5 + 1e-12)

    def test_training_reduces_loss_monotonically(self):
        # 2-layer net on a fixed 100-point regression task, first 50 steps
        rng = np.random.default_rng(1234)
        store = ParamStore()
        net = MLP(store, "m", [3, 16, 1], rng)
        x = rng.normal(size=(100, 3))
        y = np.sin(x.sum(axis=1, keepdims=True))
        prev = np.inf
        for _ in range(50):
            store.zero_grad()
            loss = mse(net(Tensor(x)), y)
            loss.backward()
            store.adam_step(1e-3)
            assert loss.item() < prev + 1e-12
            prev = loss.item()


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        store = ParamStore()
        MLP(store, "m", [4, 8, 2], rng)
        Embedding(store, "e", 5, 3, rng)
        store.meta["n"] = "5"
        path = tmp_path / "model.ckpt"
        store.save(path)

        other = ParamStore()
        other.load(path)
        assert other.meta["n"] == "5"
        assert set(other.params) == set(store.params)
        for name in store.params:
            assert np.array_equal(other.params[name].data, store.params[name].data)

    def test_load_into_existing_checks_shapes(self, tmp_path):
        rng = np.random.default_rng(12)
        a = ParamStore()
        MLP(a, "m", [4, 8, 2], rng)
        path = tmp_path / "m.ckpt"
        a.save(path)
        b = ParamStore()
        MLP(b, "m", [4, 9, 2], rng)
        with pytest.raises(ShapeMismatch):
            b.load(path)

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        rng = np.random.default_rng(13)
        store = ParamStore()
        MLP(store, "m", [4, 8, 2], rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        store.save(p1)
        store.save(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestEmbedding:
    def test_lookup_and_out_of_range(self):
        rng = np.random.default_rng(14)
        store = ParamStore()
        emb = Embedding(store, "e", 4, 3, rng)
        out = emb(np.array([1, 3]))
        assert np.array_equal(out.data[0], store["e.E"].data[1])
        with pytest.raises(IndexOutOfRange):
            take_rows(store["e.E"], np.array([7]))

    def test_gather_gradient_scatter_adds(self):
        rng = np.random.default_rng(15)
        store = ParamStore()
        emb = Embedding(store, "e", 3, 2, rng)
        out = emb(np.array([1, 1, 2]))
        tsum(out).backward()
        g = store["e.E"].grad
        assert np.allclose(g[1], [2.0, 2.0])
        assert np.allclose(g[2], [1.0, 1.0])
        assert np.allclose(g[0], [0.0, 0.0])


class TestRandomizedFiniteDifferences:
    def test_mixed_graph_configurations(self):
        # randomized op mixes: dense + lstm + ce + gaussian + mse
        rng = np.random.default_rng(99)
        for trial in range(25):
            store = ParamStore()
            width = int(rng.integers(3, 7))
            net = MLP(store, "m", [width, int(rng.integers(4, 9)), 7], rng)
            cell = LstmCell(store, "l", 7, int(rng.integers(3, 6)), rng)
            x = rng.normal(size=(3, width))
            target = rng.normal(size=(3, 7))
            cls = int(rng.integers(0, cell.n_hidden))

            def run():
                mid = net(Tensor(x))
                state = cell.zero_state(batch=3)
                _, h = cell(state, mid)
                _, h2 = cell((h, h), mid)
                ce = tmean(softmax_ce(h2, np.full(3, cls)))
                gl = tmean(gaussian_logpdf(target, mid, Tensor(np.zeros(7))))
                return ce - gl + mse(mid, target)

            finite_diff_check(store, run, rng, samples=6)
