import numpy as np
import pytest

from tuneqa.adapter import (
    AdapterConfig,
    MusicContextEmbedding,
    REFERENCE_CONFIG,
    SubBlockParams,
    adapter_backward,
    adapter_backward_from_cache,
    adapter_forward,
    adapter_forward_cached,
    aggregate_layers,
    init_params,
    param_shapes,
    project,
    subblock_forward,
    validate_params,
)
from tuneqa.checkpoint import load_arrays, require_names, save_arrays
from tuneqa.encoder import EncoderSpec, LayerStackedEmbedding
from tuneqa.errors import CheckpointError, ConfigError, NumericError

from oracles import (
    finite_difference_grads,
    matvec_scalar_loop,
    max_relative_error,
    subblock_scalar_loop,
)

TOY = AdapterConfig(num_layers=3, in_dim=4, model_dim=8, num_subblocks=3)


def toy_embedding(rng, frames=5, config=TOY):
    spec = EncoderSpec(config.num_layers, config.in_dim)
    values = rng.standard_normal((config.num_layers, frames, config.in_dim))
    return LayerStackedEmbedding(values=values, spec=spec)


class TestConfig:
    def test_reference_matches_published_scale(self):
        assert REFERENCE_CONFIG.num_layers == 25
        assert REFERENCE_CONFIG.in_dim == 1024
        assert REFERENCE_CONFIG.model_dim == 4096
        assert REFERENCE_CONFIG.num_subblocks == 3
        assert REFERENCE_CONFIG.hidden == 4096

    def test_invalid_counts_rejected(self):
        with pytest.raises(ConfigError):
            AdapterConfig(num_layers=0, in_dim=4, model_dim=8)
        with pytest.raises(ConfigError):
            AdapterConfig(num_layers=3, in_dim=4, model_dim=8, num_subblocks=0)


class TestInit:
    def test_param_inventory_and_shapes(self):
        shapes = param_shapes(TOY)
        assert shapes["conv.weight"] == (3,)
        assert shapes["conv.bias"] == (1,)
        assert shapes["proj.weight"] == (8, 4)
        assert shapes["proj.bias"] == (8,)
        for i in (1, 2, 3):
            assert shapes[f"block{i}.norm.weight"] == (8,)
            assert shapes[f"block{i}.norm.bias"] == (8,)
            assert shapes[f"block{i}.l1.weight"] == (8, 8)
            assert shapes[f"block{i}.l2.weight"] == (8, 8)
            assert shapes[f"block{i}.l3.weight"] == (8, 8)
            assert shapes[f"block{i}.l1.bias"] == (8,)
            assert shapes[f"block{i}.l2.bias"] == (8,)
            assert shapes[f"block{i}.l3.bias"] == (8,)
        # 4 shared arrays plus 8 per sub-block
        assert len(shapes) == 4 + 8 * TOY.num_subblocks

    def test_init_residual_branches_start_at_zero(self):
        params = init_params(TOY, seed=11)
        for i in (1, 2, 3):
            assert np.all(params[f"block{i}.l2.weight"] == 0.0)
            assert np.all(params[f"block{i}.l2.bias"] == 0.0)
            assert np.all(params[f"block{i}.norm.weight"] == 1.0)
            assert np.all(params[f"block{i}.norm.bias"] == 0.0)

    def test_init_is_seeded(self):
        a = init_params(TOY, seed=5)
        b = init_params(TOY, seed=5)
        c = init_params(TOY, seed=6)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_validate_rejects_missing_and_unknown(self):
        params = init_params(TOY, seed=0)
        incomplete = dict(params)
        incomplete.pop("proj.bias")
        with pytest.raises(ConfigError, match="proj.bias"):
            validate_params(incomplete, TOY)
        extra = dict(params)
        extra["stray"] = np.zeros(3)
        with pytest.raises(ConfigError, match="stray"):
            validate_params(extra, TOY)
        wrong = dict(params)
        wrong["conv.weight"] = np.zeros(4)
        with pytest.raises(ConfigError, match="conv.weight"):
            validate_params(wrong, TOY)


class TestAggregateAndProject:
    def test_aggregate_matches_scalar_loops(self, rng):
        emb = toy_embedding(rng)
        params = init_params(TOY, seed=2)
        w = params["conv.weight"]
        b = params["conv.bias"]
        got = aggregate_layers(emb, w, b, TOY)
        frames = emb.values.shape[1]
        expect = np.zeros(TOY.in_dim)
        for t in range(frames):
            for d in range(TOY.in_dim):
                acc = b[0]
                for layer in range(TOY.num_layers):
                    acc += w[layer] * emb.values[layer, t, d]
                expect[d] += acc / frames
        assert max_relative_error(got, expect) < 1e-12

    def test_uniform_weights_recover_plain_mean(self, rng):
        emb = toy_embedding(rng)
        w = np.full(TOY.num_layers, 1.0 / TOY.num_layers)
        b = np.zeros(1)
        got = aggregate_layers(emb, w, b, TOY)
        expect = emb.values.mean(axis=(0, 1))
        assert max_relative_error(got, expect) < 1e-12

    def test_project_matches_scalar_loop(self, rng):
        params = init_params(TOY, seed=3)
        x = rng.standard_normal(TOY.in_dim)
        got = project(x, params["proj.weight"], params["proj.bias"])
        expect = matvec_scalar_loop(params["proj.weight"], params["proj.bias"], x)
        assert max_relative_error(got, expect) < 1e-12
        assert got.shape == (TOY.model_dim,)


class TestSubBlock:
    def test_matches_scalar_oracle(self, rng):
        params = init_params(TOY, seed=4)
        # give the residual branch real weight so the gate path is exercised
        params["block1.l2.weight"] = rng.standard_normal((8, 8)) * 0.3
        params["block1.l2.bias"] = rng.standard_normal(8) * 0.1
        x = rng.standard_normal(8)
        got = subblock_forward(x, SubBlockParams.from_flat(params, 1))
        expect = subblock_scalar_loop(
            x,
            params["block1.norm.weight"], params["block1.norm.bias"],
            params["block1.l1.weight"], params["block1.l1.bias"],
            params["block1.l2.weight"], params["block1.l2.bias"],
            params["block1.l3.weight"], params["block1.l3.bias"],
        )
        assert max_relative_error(got, expect) < 1e-10

    def test_zeroed_branch_is_bit_exact_identity(self, rng):
        # l2 zero-init means every sub-block adds exactly 0.0, so the chain
        # is the identity map bitwise, not just within tolerance.
        params = init_params(TOY, seed=9)
        block = SubBlockParams.from_flat(params, 1)
        for _ in range(100):
            x = rng.standard_normal(8)
            y = subblock_forward(x, block)
            assert np.array_equal(x, y)

    def test_chain_identity_preserves_projection_output(self, rng):
        params = init_params(TOY, seed=9)
        emb = toy_embedding(rng)
        pooled = aggregate_layers(emb, params["conv.weight"], params["conv.bias"], TOY)
        projected = project(pooled, params["proj.weight"], params["proj.bias"])
        ctx = adapter_forward(emb, params, TOY)
        assert np.array_equal(ctx.values, projected)

    def test_nonfinite_input_raises(self):
        params = init_params(TOY, seed=1)
        x = np.zeros(8)
        x[3] = np.inf
        with pytest.raises(NumericError):
            subblock_forward(x, SubBlockParams.from_flat(params, 1))


class TestForward:
    def test_context_embedding_shape_and_type(self, rng):
        params = init_params(TOY, seed=12)
        ctx = adapter_forward(toy_embedding(rng), params, TOY)
        assert isinstance(ctx, MusicContextEmbedding)
        assert ctx.values.shape == (TOY.model_dim,)
        assert len(ctx) == TOY.model_dim

    def test_forward_deterministic(self, rng):
        params = init_params(TOY, seed=12)
        emb = toy_embedding(rng)
        a = adapter_forward(emb, params, TOY).values
        b = adapter_forward(emb, params, TOY).values
        assert np.array_equal(a, b)

    def test_cached_forward_agrees_with_plain(self, rng):
        params = init_params(TOY, seed=13)
        for k in list(params):
            if ".l2." in k:
                params[k] = rng.standard_normal(params[k].shape) * 0.2
        emb = toy_embedding(rng)
        plain = adapter_forward(emb, params, TOY).values
        cached, cache = adapter_forward_cached(emb, params, TOY)
        assert np.array_equal(plain, cached.values)
        assert len(cache["blocks"]) == TOY.num_subblocks

    def test_layer_count_mismatch_rejected(self, rng):
        params = init_params(TOY, seed=13)
        bad = rng.standard_normal((TOY.num_layers + 1, 5, TOY.in_dim))
        with pytest.raises(ConfigError):
            adapter_forward(bad, params, TOY)


class TestBackward:
    def _warm_params(self, rng, config=TOY):
        params = init_params(config, seed=21)
        # move off the zero-init manifold so all gradient paths are live
        for k in list(params):
            if ".l2." in k:
                params[k] = rng.standard_normal(params[k].shape) * 0.3
        return params

    def test_gradients_match_finite_differences(self, rng):
        config = TOY
        params = self._warm_params(rng, config)
        emb = toy_embedding(rng, frames=4, config=config)
        target = rng.standard_normal(config.model_dim)

        def loss_fn(p):
            out = adapter_forward(emb, p, config).values
            return 0.5 * float(np.sum((out - target) ** 2))

        out, cache = adapter_forward_cached(emb, params, config)
        upstream = out.values - target
        grads = adapter_backward_from_cache(cache, params, config, upstream)
        numeric = finite_difference_grads(loss_fn, params)
        assert grads.keys() == numeric.keys()
        for name in grads:
            err = max_relative_error(grads[name], numeric[name])
            assert err < 1e-4, f"{name}: {err}"

    def test_backward_convenience_wrapper_matches_cached(self, rng):
        params = self._warm_params(rng)
        emb = toy_embedding(rng)
        upstream = rng.standard_normal(TOY.model_dim)
        direct = adapter_backward(emb, params, TOY, upstream)
        _, cache = adapter_forward_cached(emb, params, TOY)
        cached = adapter_backward_from_cache(cache, params, TOY, upstream)
        for name in direct:
            assert np.array_equal(direct[name], cached[name])

    def test_zero_upstream_gives_zero_grads(self, rng):
        params = self._warm_params(rng)
        emb = toy_embedding(rng)
        grads = adapter_backward(emb, params, TOY, np.zeros(TOY.model_dim))
        for name, g in grads.items():
            assert np.all(g == 0.0), name

    def test_grad_record_covers_exactly_the_param_set(self, rng):
        params = self._warm_params(rng)
        grads = adapter_backward(
            toy_embedding(rng), params, TOY, rng.standard_normal(TOY.model_dim))
        assert set(grads) == set(param_shapes(TOY))
        for name, g in grads.items():
            assert g.shape == params[name].shape

    def test_nonfinite_upstream_rejected(self, rng):
        params = self._warm_params(rng)
        bad = np.zeros(TOY.model_dim)
        bad[0] = np.nan
        with pytest.raises(NumericError):
            adapter_backward(toy_embedding(rng), params, TOY, bad)


class TestCheckpoint:
    def test_roundtrip_preserves_values(self, tmp_path, rng):
        params = init_params(TOY, seed=31)
        path = tmp_path / "adapter.npz"
        save_arrays(path, params, meta={"kind": "adapter"})
        loaded, meta = load_arrays(path)
        assert meta["kind"] == "adapter"
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k])

    def test_name_set_enforced(self, tmp_path):
        params = init_params(TOY, seed=31)
        partial = {k: v for k, v in params.items() if k != "conv.bias"}
        path = tmp_path / "broken.npz"
        save_arrays(path, partial, meta={})
        loaded, _ = load_arrays(path)
        with pytest.raises(CheckpointError, match="conv.bias"):
            require_names(loaded, set(param_shapes(TOY)), context=str(path))

    def test_version_mismatch_rejected(self, tmp_path):
        import json

        path = tmp_path / "old.npz"
        np.savez(path, _meta=np.frombuffer(
            json.dumps({"format_version": 99}).encode(), dtype=np.uint8))
        with pytest.raises(CheckpointError, match="version"):
            load_arrays(path)
