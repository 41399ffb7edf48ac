import numpy as np
import pytest

from roadforge import autodiff as ad
from roadforge.model import (
    GGT,
    GGTConfig,
    MLPBaseline,
    RNNBaseline,
    build_model,
    load_model_weights,
    positional_encoding,
    save_model,
    teacher_inputs,
)
from roadforge.ordering import CanonicalSequence


def tiny_cfg(**kw) -> GGTConfig:
    base = dict(frontier=3, blocks=2, width=16, heads=2, mlp_inner=32, head_hidden=16, ca_hidden=48)
    base.update(kw)
    return GGTConfig(**base)


def zero_params(model) -> None:
    for p in model.named_params().values():
        p.data[...] = 0.0


def random_sequence(rng, frontier: int, n_nodes: int = 4) -> CanonicalSequence:
    adjacency = np.zeros((n_nodes + 1, frontier))
    coords = np.zeros((n_nodes + 1, 2))
    coords[:n_nodes] = rng.uniform(-0.9, 0.9, (n_nodes, 2))
    stop = np.zeros(n_nodes + 1)
    stop[-1] = 1.0
    for t in range(1, n_nodes):
        adjacency[t, int(rng.integers(0, min(t, frontier)))] = 1.0
    return CanonicalSequence(adjacency, coords, stop, frontier)


def random_image(rng):
    return (rng.random((64, 64)) < 0.2).astype(np.float64)


class TestPositionalEncoding:
    def test_t_zero_alternates(self):
        p = positional_encoding(0, 8)
        assert p.tolist() == [0, 1, 0, 1, 0, 1, 0, 1]

    def test_range(self):
        for t in (0, 1, 7, 123):
            assert (np.abs(positional_encoding(t, 33)) <= 1.0).all()

    def test_first_slot_is_sin_t(self):
        assert positional_encoding(1, 16)[0] == pytest.approx(np.sin(1.0))
        assert positional_encoding(1, 16)[0] == pytest.approx(0.84147, abs=1e-5)

    def test_odd_dim(self):
        p = positional_encoding(3, 7)
        assert p.shape == (7,)

    def test_negative_t(self):
        with pytest.raises(ValueError):
            positional_encoding(-1, 8)


class TestConfig:
    def test_width_divisibility(self):
        with pytest.raises(ValueError):
            GGTConfig(frontier=3, width=10, heads=3)

    def test_input_width(self):
        cfg = GGTConfig(frontier=5)
        assert cfg.step_width == 8  # (M+1) adjacency channels + 2 coords
        assert cfg.input_width == 8 + 900

    def test_round_trip_dict(self):
        cfg = tiny_cfg(context_attention=False)
        assert GGTConfig.from_dict(cfg.to_dict()) == cfg


class TestEncoder:
    def test_output_length_900(self):
        model = GGT(GGTConfig(frontier=3, blocks=1, width=16, heads=2, mlp_inner=8, head_hidden=8))
        rng = np.random.default_rng(0)
        code = model.encoder(random_image(rng)[None], training=False)
        assert code.data.shape == (1, 900)

    def test_identical_images_identical_codes(self):
        model = GGT(tiny_cfg(), seed=3)
        rng = np.random.default_rng(1)
        img = random_image(rng)
        a = model.encoder(img[None], training=False).data
        b = model.encoder(img.copy()[None], training=False).data
        assert np.array_equal(a, b)

    def test_zero_image_deterministic(self):
        m1, m2 = GGT(tiny_cfg(), seed=7), GGT(tiny_cfg(), seed=7)
        img = np.zeros((1, 64, 64))
        assert np.array_equal(
            m1.encoder(img, training=False).data, m2.encoder(img, training=False).data
        )

    def test_rejects_wrong_size(self):
        model = GGT(tiny_cfg())
        with pytest.raises(ad.ShapeMismatch):
            model.encoder(np.zeros((1, 32, 32)), training=False)


class TestContextAttention:
    def test_mask_sums_to_one(self):
        model = GGT(tiny_cfg(), seed=0)
        rng = np.random.default_rng(0)
        code = model.encoder(random_image(rng)[None], training=False)
        T = 4
        prev = rng.uniform(-1, 1, (T, model.cfg.step_width))
        code_rows = ad.add(ad.Tensor(np.zeros((T, 900))), code)
        s = model.ca.lin2(ad.relu(model.ca.lin1(ad.concat([ad.Tensor(prev), code_rows], axis=1))))
        mask = ad.softmax(s, axis=-1)
        assert np.abs(mask.data.sum(axis=-1) - 1.0).max() < 1e-12

    def test_ca_off_passes_code_through(self):
        model = GGT(tiny_cfg(context_attention=False), seed=0)
        rng = np.random.default_rng(0)
        code = model.encoder(random_image(rng)[None], training=False)
        prev = np.zeros((3, model.cfg.step_width))
        rows = model.conditioned_inputs(prev, code).data[:, model.cfg.step_width :]
        assert np.array_equal(rows, np.repeat(code.data, 3, axis=0))

    def test_zero_weights_uniform_mask(self):
        model = GGT(tiny_cfg(), seed=0)
        zero_params(model)
        rng = np.random.default_rng(0)
        img = random_image(rng)
        code = model.encoder(img[None], training=False)
        assert np.array_equal(code.data, np.zeros((1, 900)))
        prev = np.ones((2, model.cfg.step_width))
        conditioned = model.conditioned_inputs(prev, code).data[:, model.cfg.step_width :]
        # uniform mask times a zero code: exactly code / 900 = zeros
        assert np.array_equal(conditioned, np.zeros((2, 900)))

    def test_build_model_kinds(self):
        cfg = tiny_cfg()
        assert build_model("ggt", cfg).ca is not None
        assert build_model("ggt_no_ca", cfg).ca is None
        assert isinstance(build_model("mlp", cfg), MLPBaseline)
        assert isinstance(build_model("rnn", cfg), RNNBaseline)
        with pytest.raises(ValueError):
            build_model("vae", cfg)


class TestDecoder:
    def test_output_ranges(self):
        model = GGT(tiny_cfg(), seed=1)
        rng = np.random.default_rng(2)
        inputs = ad.Tensor(rng.uniform(-1, 1, (5, model.cfg.input_width)))
        adj, coords = model.decode(inputs)
        assert adj.data.shape == (5, 4)
        assert coords.data.shape == (5, 2)
        assert ((adj.data > 0) & (adj.data < 1)).all()
        assert ((coords.data > -1) & (coords.data < 1)).all()

    def test_causality_bit_exact(self):
        model = GGT(tiny_cfg(), seed=4)
        rng = np.random.default_rng(5)
        T = 6
        x = rng.uniform(-1, 1, (T, model.cfg.input_width))
        with ad.no_grad():
            adj0, coords0 = model.decode(ad.Tensor(x))
        for t in range(T - 1):
            y = x.copy()
            y[t + 1 :] += rng.normal(0, 3, (T - t - 1, model.cfg.input_width))
            with ad.no_grad():
                adj1, coords1 = model.decode(ad.Tensor(y))
            assert np.array_equal(adj0.data[: t + 1], adj1.data[: t + 1])
            assert np.array_equal(coords0.data[: t + 1], coords1.data[: t + 1])

    def test_zero_weights_emit_half(self):
        model = GGT(tiny_cfg(), seed=0)
        zero_params(model)
        inputs = ad.Tensor(np.random.default_rng(0).uniform(-1, 1, (1, model.cfg.input_width)))
        adj, coords = model.decode(inputs)
        assert np.array_equal(adj.data, np.full((1, 4), 0.5))
        assert np.array_equal(coords.data, np.zeros((1, 2)))

    def test_teacher_inputs_shift(self):
        rng = np.random.default_rng(0)
        seq = random_sequence(rng, 3)
        inputs = teacher_inputs(seq)
        rec = np.concatenate([seq.adjacency_with_stop(), seq.coords], axis=1)
        assert np.array_equal(inputs[0], np.zeros(6))
        assert np.array_equal(inputs[1:], rec[:-1])

    def test_exclude_self_attention_flag(self):
        model = GGT(tiny_cfg(exclude_self_attention=True), seed=2)
        rng = np.random.default_rng(1)
        inputs = ad.Tensor(rng.uniform(-1, 1, (4, model.cfg.input_width)))
        adj, coords = model.decode(inputs)  # step 0 attends to nothing; must not NaN
        assert np.isfinite(adj.data).all() and np.isfinite(coords.data).all()


class TestGenerate:
    def test_zero_weight_model_runs_to_max_steps(self):
        model = GGT(tiny_cfg(), seed=0)
        zero_params(model)
        g = model.generate(np.zeros((64, 64)), max_steps=5)
        # stop prob is exactly 0.5, never > 0.5; all soft edges 0.5 are dropped
        assert g.n_nodes == 5
        assert g.n_edges == 0
        assert np.array_equal(g.nodes, np.zeros((5, 2)))

    def test_max_steps_one(self):
        model = GGT(tiny_cfg(), seed=8)
        g = model.generate(np.zeros((64, 64)), max_steps=1)
        assert g.n_nodes <= 1

    def test_max_steps_validation(self):
        model = GGT(tiny_cfg(), seed=8)
        with pytest.raises(ValueError):
            model.generate(np.zeros((64, 64)), max_steps=0)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        img = random_image(rng)
        a = GGT(tiny_cfg(), seed=9).generate(img, max_steps=6)
        b = GGT(tiny_cfg(), seed=9).generate(img, max_steps=6)
        assert a == b


class TestMLPBaseline:
    def test_symmetric_adjacency_exact(self):
        model = MLPBaseline(tiny_cfg(), seed=0)
        A, X = model.predict(random_image(np.random.default_rng(0)))
        assert np.array_equal(A, A.T)
        assert A.shape == (10, 10)
        assert X.shape == (10, 2)

    def test_zero_weights_half_matrix(self):
        model = MLPBaseline(tiny_cfg(), seed=0)
        zero_params(model)
        A, X = model.predict(np.zeros((64, 64)))
        off = ~np.eye(10, dtype=bool)
        assert np.array_equal(A[off], np.full(90, 0.5))
        assert np.array_equal(np.diag(A), np.zeros(10))
        assert np.array_equal(X, np.zeros((10, 2)))

    def test_generate_drops_isolated_nodes(self):
        model = MLPBaseline(tiny_cfg(), seed=0)
        zero_params(model)
        g = model.generate(np.zeros((64, 64)))
        assert g.n_nodes == 0  # soft 0.5 edges are all dropped at the threshold


class TestRNNBaseline:
    def test_hidden_size(self):
        from roadforge.model import RNN_HIDDEN

        assert RNN_HIDDEN == 256

    def test_causality(self):
        model = RNNBaseline(tiny_cfg(), seed=1)
        rng = np.random.default_rng(0)
        img = random_image(rng)
        seq = random_sequence(rng, 3, n_nodes=5)
        with ad.no_grad():
            adj0, _ = model.forward_teacher(img, seq, training=False)
        bumped = CanonicalSequence(
            seq.adjacency.copy(), seq.coords.copy(), seq.stop.copy(), seq.frontier_size
        )
        bumped.coords[4] += 0.3  # affects inputs from step 5 onward
        with ad.no_grad():
            adj1, _ = model.forward_teacher(img, bumped, training=False)
        assert np.array_equal(adj0.data[:5], adj1.data[:5])
        assert not np.array_equal(adj0.data[5], adj1.data[5])

    def test_zero_weights_half(self):
        model = RNNBaseline(tiny_cfg(), seed=0)
        zero_params(model)
        rng = np.random.default_rng(0)
        seq = random_sequence(rng, 3)
        with ad.no_grad():
            adj, coords = model.forward_teacher(np.zeros((64, 64)), seq, training=False)
        assert np.array_equal(adj.data, np.full((5, 4), 0.5))
        assert np.array_equal(coords.data, np.zeros((5, 2)))


class TestParamCountGolden:
    def test_default_config_m5(self):
        assert GGT(GGTConfig(frontier=5), seed=0).n_params() == 19326517

    def test_baselines(self):
        cfg = GGTConfig(frontier=5)
        assert MLPBaseline(cfg, seed=0).n_params() == 2988578
        assert RNNBaseline(cfg, seed=0).n_params() == 962857

    def test_count_tracks_frontier(self):
        # adjacency head and input row widths grow with M
        a = GGT(tiny_cfg(), seed=0).n_params()
        b = GGT(tiny_cfg(frontier=4), seed=0).n_params()
        assert b > a


class TestCheckpointRoundTrip:
    def test_save_load_restores_outputs(self, tmp_path):
        rng = np.random.default_rng(0)
        img = random_image(rng)
        model = GGT(tiny_cfg(), seed=5)
        before = model.generate(img, max_steps=6)
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        other = GGT(tiny_cfg(), seed=99)
        load_model_weights(other, path)
        after = other.generate(img, max_steps=6)
        assert before == after

    def test_missing_tensor_rejected(self, tmp_path):
        model = GGT(tiny_cfg(), seed=0)
        ad.save_checkpoint({"just.one": ad.Tensor(np.zeros(3))}, tmp_path / "bad.ckpt")
        with pytest.raises(ValueError):
            load_model_weights(model, tmp_path / "bad.ckpt")
