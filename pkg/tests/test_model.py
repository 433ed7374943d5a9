import numpy as np
import pytest

from splitecg import model as M
from splitecg import tensor as T
from splitecg import training as Tr

from oracles import rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _batch(rng, n=4):
    return rng.uniform(0, 1, size=(n, 1, 128)), rng.integers(0, 5, size=n)


class TestBuilders:
    def test_two_layer_layout(self):
        cfg = M.build_two_layer()
        kinds = [s.kind for s in cfg.layers]
        assert kinds == [M.CONV, M.LEAKY, M.POOL, M.CONV, M.LEAKY, M.POOL,
                         M.FLATTEN, M.DENSE, M.LEAKY, M.DENSE, M.SOFTMAX]
        assert [s.filter_size for s in cfg.layers if s.kind == M.CONV] == [7, 5]

    def test_two_layer_shapes(self):
        cfg = M.build_two_layer()
        shapes = cfg.shapes()
        assert cfg.split_shape == (16, 32)
        assert shapes[cfg.prepool_index] == (16, 64)
        assert (512,) in shapes
        assert shapes[-1] == (5,)

    def test_three_layer(self):
        cfg = M.build_three_layer()
        convs = [s for s in cfg.layers if s.kind == M.CONV]
        assert [c.filter_size for c in convs] == [7, 5, 5]
        assert all(c.filters == 16 for c in convs)
        assert cfg.depth == 3
        assert sum(1 for s in cfg.layers if s.kind == M.POOL) == 2

    def test_depth_two_is_two_layer(self):
        assert M.build_depth_k(2).layers == M.build_two_layer().layers

    @pytest.mark.parametrize("k", range(2, 9))
    def test_depth_k(self, k):
        cfg = M.build_depth_k(k)
        convs = [s for s in cfg.client_layers() if s.kind == M.CONV]
        assert len(convs) == k
        assert all(c.filter_size == 5 for c in convs[1:])
        assert cfg.shapes()[cfg.prepool_index] == (16, 64)
        assert cfg.split_shape == (16, 32)
        assert cfg.server_layers() == M.build_two_layer().server_layers()

    @pytest.mark.parametrize("k", [0, 1, 9])
    def test_depth_out_of_range(self, k):
        with pytest.raises(M.ConfigError):
            M.build_depth_k(k)

    def test_build_model_names(self):
        assert M.build_model("three-layer").layers == M.build_three_layer().layers
        assert M.build_model("depth-k", 5).depth == 5
        with pytest.raises(M.ConfigError):
            M.build_model("lenet")


class TestValidation:
    def test_softmax_must_be_last(self):
        base = M.build_two_layer()
        layers = list(base.layers[:-1])
        with pytest.raises(M.ConfigError):
            M.ModelConfig(layers, base.split_index)

    def test_split_must_follow_activation(self):
        base = M.build_two_layer()
        with pytest.raises(M.ConfigError):
            M.ModelConfig(base.layers, 4)  # after a conv
        with pytest.raises(M.ConfigError):
            M.ModelConfig(base.layers, 0)

    def test_shape_mismatch_rejected(self):
        layers = [M.conv(4, 3), M.leaky(), M.dense(5), M.SOFTMAX_LAYER]
        with pytest.raises(M.ConfigError):
            M.ModelConfig(layers, 2)

    def test_odd_length_pool_rejected(self):
        layers = [M.conv(4, 3), M.leaky(), M.POOL_LAYER, M.FLATTEN_LAYER, M.dense(5), M.SOFTMAX_LAYER]
        with pytest.raises(M.ConfigError):
            M.ModelConfig(layers, 2, input_length=7)

    def test_text_roundtrip(self):
        for cfg in (M.build_two_layer(), M.build_depth_k(6)):
            text = cfg.to_text()
            assert "=" in text
            assert M.ModelConfig.from_text(text) == cfg


class TestSplit:
    def test_partition(self):
        cfg = M.build_two_layer()
        params = M.init_params(cfg, 3)
        client, server = M.split(cfg, params)
        client_ids = {id(p) for p in client.parameters()}
        assert not client_ids & {id(p) for p in server.parameters()}
        assert [p.shape for p in client.parameters()] == [(16, 1, 7), (16,), (16, 16, 5), (16,)]
        assert [p.shape for p in server.parameters()] == [(128, 512), (128,), (5, 128), (5,)]
        assert len(client.parameters()) + len(server.parameters()) == sum(len(v) for v in params.values())

    def test_split_copies(self):
        cfg = M.build_two_layer()
        params = M.init_params(cfg, 3)
        client, _ = M.split(cfg, params)
        client.parameters()[0][...] = 0
        assert np.any(params[0][0] != 0)

    def test_composition_equals_full(self, rng):
        cfg = M.build_three_layer()
        params = M.init_params(cfg, 11)
        client, server = M.split(cfg, params)
        x, _ = _batch(rng, 6)
        full = M.full_model(cfg, params).forward(x)
        np.testing.assert_array_equal(server.forward(client.forward(x)), full)
        np.testing.assert_array_equal(M.predict([client, server], x), M.predict([M.full_model(cfg, params)], x))

    def test_probabilities(self, rng):
        cfg = M.build_two_layer()
        probs = M.full_model(cfg, M.init_params(cfg, 0)).forward(_batch(rng, 8)[0])
        assert probs.shape == (8, 5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_server_init_independent_of_depth(self):
        base = M.server_part(M.build_depth_k(2), 5).parameters()
        for k in (3, 8):
            other = M.server_part(M.build_depth_k(k), 5).parameters()
            for a, b in zip(base, other):
                assert a.tobytes() == b.tobytes()

    def test_parts_match_init_params(self):
        cfg = M.build_two_layer()
        full = M.init_params(cfg, 9)
        client, server = M.build_parts(cfg, 9)
        merged = M.merge(client, server)
        for i in full:
            for a, b in zip(full[i], merged[i]):
                np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_backward_before_forward(self):
        client, server = M.build_parts(M.build_two_layer(), 0)
        with pytest.raises(M.StateError):
            client.backward(np.zeros((1, 16, 32)))
        with pytest.raises(M.StateError):
            server.loss_backward(np.array([0]))

    def test_cache_consumed_once(self, rng):
        client, _ = M.build_parts(M.build_two_layer(), 0)
        client.forward(_batch(rng, 2)[0])
        client.backward(np.ones((2, 16, 32)))
        with pytest.raises(M.StateError):
            client.backward(np.ones((2, 16, 32)))

    def test_end_to_end_finite_differences(self, rng):
        cfg = M.build_two_layer()
        full = M.full_model(cfg, M.init_params(cfg, 2))
        x, y = _batch(rng, 3)

        def loss_and_pattern():
            # leaky signs and pool winners; a central difference straddling a
            # change of this pattern measures a kink, not the derivative
            full.forward(x)
            cache = full._cache
            pattern = b"".join((cache[i] > 0).tobytes() if s.kind == M.LEAKY else cache[i].tobytes()
                               for i, s in enumerate(cfg.layers) if s.kind in (M.LEAKY, M.POOL))
            return full.loss_backward(y, need_input_grad=False)[0], pattern

        full.forward(x)
        _, _, grads, gx = full.loss_backward(y, need_input_grad=True)
        checked = skipped = 0
        for value, grad in [*zip(full.parameters(), grads), (x, gx)]:
            flat, gflat = value.reshape(-1), grad.reshape(-1)
            for j in rng.choice(flat.size, size=min(15, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + 1e-5
                up, p_up = loss_and_pattern()
                flat[j] = old - 1e-5
                down, p_down = loss_and_pattern()
                flat[j] = old
                if p_up != p_down:
                    skipped += 1
                    continue
                numeric = (up - down) / 2e-5
                assert rel_error(gflat[j], numeric) <= 1e-4 or abs(gflat[j] - numeric) < 1e-9
                checked += 1
        assert checked >= 0.9 * (checked + skipped)

    def test_split_backward_equals_full(self, rng):
        cfg = M.build_two_layer()
        params = M.init_params(cfg, 4)
        client, server = M.split(cfg, params)
        full = M.full_model(cfg, params)
        x, y = _batch(rng, 5)
        full.forward(x)
        _, _, g_full, _ = full.loss_backward(y, need_input_grad=False)
        a = client.forward(x)
        server.forward(a)
        _, _, g_server, g_a = server.loss_backward(y)
        g_client, _ = client.backward(g_a, need_input_grad=False)
        for a_, b_ in zip(g_full, g_client + g_server):
            np.testing.assert_array_equal(a_, b_)


class TestSingleStep:
    def test_split_step_equals_nonsplit_step(self, rng):
        cfg = M.build_two_layer()
        x, y = _batch(rng, 32)
        sync = Tr.SyncConfig(seed=5, batch_size=32, total_batches=1, epochs=1, exact=True)
        a = Tr.train_nonsplit(cfg, (x, y), (x, y), sync)
        b = Tr.train_split_local(cfg, (x, y), (x, y), sync)
        for i in a.params:
            for p, q in zip(a.params[i], b.params[i]):
                np.testing.assert_array_equal(p, q)

    def test_adam_moves_every_parameter(self, rng):
        cfg = M.build_two_layer()
        before = M.init_params(cfg, 5)
        x, y = _batch(rng, 32)
        after = Tr.train_nonsplit(cfg, (x, y), (x, y), Tr.SyncConfig(seed=5, epochs=1)).params
        for i in before:
            for p, q in zip(before[i], after[i]):
                assert not np.array_equal(p, q)

    def test_leaky_slope_default(self):
        assert all(s.alpha == T.LEAKY_SLOPE for s in M.build_two_layer().layers if s.kind == M.LEAKY)
