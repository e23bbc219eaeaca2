import numpy as np
import pytest

from seqkv.errors import ConfigurationError, ParameterError, UnsupportedPathError
from seqkv.kvmodel import ModelShape, append_token_kv, new_cache
from seqkv.pipeline import (
    DecodeConfig,
    QueryTrace,
    decode_step_baseline,
    decode_step_fused,
    decode_step_reconstruct,
    decode_step_static,
    make_identity_codecs,
    make_schedule,
    prefill_compressed,
    run_generation,
)

from conftest import (
    random_cache_inputs,
    random_linear_codecs,
    random_queries,
    rel_err,
)


class TestSchedule:
    def test_all_ones(self):
        s = make_schedule(4, 1.0, 1.0)
        assert s.ratios == (1.0, 1.0, 1.0, 1.0)
        assert s.mean_retention == 1.0

    def test_paper_default_mean(self):
        s = make_schedule(36, 0.75, 0.05)
        assert s.mean_retention == pytest.approx(0.40, abs=1e-12)

    def test_two_layers(self):
        assert make_schedule(2, 0.8, 0.2).ratios == (0.8, 0.2)

    def test_nonincreasing(self):
        s = make_schedule(7, 0.9, 0.1)
        assert all(a >= b for a, b in zip(s.ratios, s.ratios[1:]))

    def test_invalid(self):
        with pytest.raises(ParameterError):
            make_schedule(0, 0.5, 0.5)
        with pytest.raises(ParameterError):
            make_schedule(3, 0.5, 0.8)
        with pytest.raises(ParameterError):
            make_schedule(3, 1.2, 0.1)

    def test_effective_lengths_exact_mean(self):
        s = make_schedule(36, 0.75, 0.05)
        ks = s.effective_lengths(100)
        assert sum(ks) == 1440  # retention 0.40 of 3600 rows, no ceiling slack
        assert s.mean_effective_retention(100) == pytest.approx(0.40)


def build(rng, *, layers=2, kv_heads=2, group=2, n=12, d=6, c=3, retention=0.5, segments=1):
    shape = ModelShape(layers=layers, kv_heads=kv_heads, query_heads=kv_heads * group, head_dim=d)
    text, vision = random_cache_inputs(rng, shape, n=n, text_len=c, segments=segments)
    schedule = make_schedule(layers, retention, retention)
    codecs = random_linear_codecs(rng, layers, kv_heads, n, retention)
    q = random_queries(rng, shape)
    return shape, text, vision, schedule, codecs, q


class TestPrefill:
    def test_pyramid_per_layer_row_counts(self, rng):
        # n=20 under a 0.75 -> 0.35 ramp over 3 layers: ceil(r*20) = 15, 11, 7
        shape = ModelShape(layers=3, kv_heads=2, query_heads=2, head_dim=4)
        text, vision = random_cache_inputs(rng, shape, n=20, text_len=2)
        schedule = make_schedule(3, 0.75, 0.35)
        codecs = [
            random_linear_codecs(rng, 1, 2, 20, r)[0] for r in schedule.ratios
        ]
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        rows = [lc.vision[0].keys.shape[1] for lc in cache.layers]
        assert rows == [15, 11, 7]
        assert [lc.vision[0].values.shape[1] for lc in cache.layers] == rows

    def test_recoverable_fixture_reconstruct_close_to_baseline(self, rng):
        # keys in a retained-size token span (reconstructor solved by least
        # squares, exact for in-span data) and values projected onto the
        # fitted PCA span: compressed decode tracks the baseline
        from seqkv import synth
        from seqkv.keycodec import KeyCodec
        from seqkv.kvmodel import LayerCodec
        from seqkv.valuecodec import fit_value_pca

        profile = synth.SynthProfile(
            seed=77, n=20, d_head=8, kv_heads=2, layers=1, key_cosine=0.6,
            key_rank=8, value_cosine=0.0,
        )
        keys, values = synth.gen_kv_dataset(profile, 6)
        retention = 0.4  # retains 8 rows = the key token-space rank
        n, k = 20, 8
        mask = np.arange(0, 2 * k, 2, dtype=np.int64)
        w = np.empty((2, n, k), dtype=np.float32)
        train = keys[:-1, 0].astype(np.float64)  # (samples, heads, n, d)
        for h in range(2):
            lhs = np.concatenate([s[h, mask] for s in train], axis=1)
            rhs = np.concatenate([s[h] for s in train], axis=1)
            w[h] = np.linalg.lstsq(lhs.T, rhs.T, rcond=None)[0].T
        key_codec = KeyCodec(mask=mask, kind="linear", weights={"w": w}, n=n)
        from seqkv.keycodec import compress_keys, reconstruct_keys

        khat = reconstruct_keys(key_codec, compress_keys(key_codec, keys[-1, 0]))
        assert np.abs(khat - keys[-1, 0]).max() < 1e-4  # incl. retained rows
        value_pca = fit_value_pca(values[:-1, 0], retention)
        codecs = [LayerCodec(key=key_codec, value=value_pca, retention=retention)]

        shape = ModelShape(layers=1, kv_heads=2, query_heads=2, head_dim=8)
        zeros = np.zeros((2, 0, 8), np.float32)
        # project the held-out values onto the fitted affine subspace so the
        # value side is exactly recoverable; keys are in-span by construction
        from seqkv.valuecodec import compress_values, reconstruct_values

        v_span = reconstruct_values(value_pca, *compress_values(value_pca, values[-1, 0]))
        vision = [[(keys[-1, 0], v_span)]]
        schedule = make_schedule(1, retention, retention)
        full = new_cache(shape, [(zeros, zeros)], vision, None, None, mode="full")
        comp = prefill_compressed(shape, [(zeros, zeros)], vision, schedule, codecs)
        q = random_queries(rng, shape)
        base = decode_step_baseline(full, q)
        rec = decode_step_reconstruct(comp, q, codecs)
        assert rel_err(base.outputs, rec.outputs) < 1e-3


class TestBaseline:
    def test_single_entry_returns_value(self):
        shape = ModelShape(layers=1, kv_heads=1, query_heads=1, head_dim=3)
        text = [(np.zeros((1, 0, 3), np.float32), np.zeros((1, 0, 3), np.float32))]
        v = np.array([[[1.0, 2.0, 3.0]]], dtype=np.float32)
        vision = [[(np.ones((1, 1, 3), np.float32), v)]]
        cache = new_cache(shape, text, vision, None, None, mode="full")
        res = decode_step_baseline(cache, np.ones((1, 1, 3), np.float32))
        np.testing.assert_allclose(res.outputs[0, 0], [1, 2, 3], atol=1e-6)
        np.testing.assert_allclose(res.weights[0], [[1.0]], atol=1e-7)

    def test_two_identical_keys_split_evenly(self):
        shape = ModelShape(layers=1, kv_heads=1, query_heads=1, head_dim=2)
        text = [(np.zeros((1, 0, 2), np.float32), np.zeros((1, 0, 2), np.float32))]
        k = np.array([[[1.0, 0.0], [1.0, 0.0]]], dtype=np.float32)
        v = np.array([[[2.0, 0.0], [4.0, 6.0]]], dtype=np.float32)
        cache = new_cache(shape, text, [[(k, v)]], None, None, mode="full")
        res = decode_step_baseline(cache, np.ones((1, 1, 2), np.float32))
        np.testing.assert_allclose(res.weights[0], [[0.5, 0.5]], atol=1e-7)
        np.testing.assert_allclose(res.outputs[0, 0], [3.0, 3.0], atol=1e-6)

    def test_matches_dense_oracle(self, rng):
        shape = ModelShape(layers=1, kv_heads=2, query_heads=2, head_dim=4)
        text, vision = random_cache_inputs(rng, shape, n=6, text_len=0)
        cache = new_cache(shape, text, vision, None, None, mode="full")
        q = random_queries(rng, shape)
        res = decode_step_baseline(cache, q)
        for g in range(2):
            keys = vision[0][0][0][g].astype(np.float64)
            vals = vision[0][0][1][g].astype(np.float64)
            logits = keys @ q[0, g].astype(np.float64) / np.sqrt(4)
            p = np.exp(logits - logits.max())
            p /= p.sum()
            np.testing.assert_allclose(res.outputs[0, g], p @ vals, atol=1e-5)

    def test_gqa_mapping(self, rng):
        # query head g attends through kv head g // group
        shape = ModelShape(layers=1, kv_heads=2, query_heads=4, head_dim=4)
        text, vision = random_cache_inputs(rng, shape, n=5, text_len=2)
        cache = new_cache(shape, text, vision, None, None, mode="full")
        q = random_queries(rng, shape)
        q[0, 2] = q[0, 1]  # same query, different kv head group
        res = decode_step_baseline(cache, q)
        assert not np.allclose(res.outputs[0, 1], res.outputs[0, 2])

    def test_needs_full_cache(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng)
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        with pytest.raises(ConfigurationError):
            decode_step_baseline(cache, q)


class TestReconstruct:
    def test_identity_codecs_match_baseline(self, rng):
        shape, text, vision, _, _, q = build(rng, retention=1.0)
        ident = make_identity_codecs(shape.layers, shape.kv_heads, 12)
        full = new_cache(shape, text, vision, None, None, mode="full")
        comp = prefill_compressed(shape, text, vision, make_schedule(2, 1, 1), ident)
        base = decode_step_baseline(full, q)
        rec = decode_step_reconstruct(comp, q, ident)
        assert rel_err(base.outputs, rec.outputs) < 1e-5

    def test_ablation_requires_matching_cache(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng)
        both = prefill_compressed(shape, text, vision, schedule, codecs, ablation="both")
        with pytest.raises(ConfigurationError):
            decode_step_reconstruct(both, q, codecs, ablation="keys_only")
        with pytest.raises(ConfigurationError):
            decode_step_reconstruct(both, q, codecs, ablation="values_only")

    def test_values_only_keeps_baseline_weights(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng)
        full = new_cache(shape, text, vision, None, None, mode="full")
        vcache = prefill_compressed(shape, text, vision, schedule, codecs, ablation="values_only")
        base = decode_step_baseline(full, q)
        rec = decode_step_reconstruct(vcache, q, codecs, ablation="values_only")
        # value-side compression cannot change the score geometry
        for wb, wr in zip(base.weights, rec.weights):
            assert rel_err(wb, wr) < 1e-6

    def test_traffic_counts_compressed_reads(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng, retention=0.5, n=12)
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        res = decode_step_reconstruct(cache, q, codecs)
        b = shape.kv_bytes
        expect_vision = shape.layers * 2 * shape.kv_heads * 6 * shape.head_dim * b
        assert res.traffic.vision_bytes == expect_vision
        assert res.traffic.codec_bytes > 0
        assert res.traffic.mean_bytes == shape.layers * shape.kv_heads * shape.head_dim * b


class TestFused:
    def test_identity_matches_baseline(self, rng):
        shape, text, vision, _, _, q = build(rng, retention=1.0)
        ident = make_identity_codecs(shape.layers, shape.kv_heads, 12)
        full = new_cache(shape, text, vision, None, None, mode="full")
        comp = prefill_compressed(shape, text, vision, make_schedule(2, 1, 1), ident)
        base = decode_step_baseline(full, q)
        fused = decode_step_fused(comp, q, ident)
        assert rel_err(base.outputs, fused.outputs) < 1e-5

    def test_matches_reconstruct_over_random_configs(self, rng):
        worst = 0.0
        for _ in range(25):
            layers = int(rng.integers(1, 3))
            kv_heads = int(rng.choice([1, 2, 4]))
            group = int(rng.choice([1, 2]))
            n = int(rng.integers(8, 33))
            d = int(rng.choice([4, 16]))
            retention = float(rng.choice([0.25, 0.5]))
            segments = int(rng.integers(1, 3))
            shape, text, vision, schedule, codecs, q = build(
                rng,
                layers=layers,
                kv_heads=kv_heads,
                group=group,
                n=n,
                d=d,
                c=int(rng.integers(0, 4)),
                retention=retention,
                segments=segments,
            )
            cache = prefill_compressed(shape, text, vision, schedule, codecs)
            for li in range(layers):
                append_token_kv(
                    cache,
                    li,
                    rng.standard_normal((kv_heads, d)).astype(np.float32),
                    rng.standard_normal((kv_heads, d)).astype(np.float32),
                )
            rec = decode_step_reconstruct(cache, q, codecs)
            fus = decode_step_fused(cache, q, codecs)
            worst = max(worst, rel_err(rec.outputs, fus.outputs))
            worst = max(worst, max(rel_err(a, b) for a, b in zip(rec.weights, fus.weights)))
        assert worst < 1e-5

    def test_vision_traffic_is_retention_scaled(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng, retention=0.5, n=12)
        full = new_cache(shape, text, vision, None, None, mode="full")
        comp = prefill_compressed(shape, text, vision, schedule, codecs)
        base = decode_step_baseline(full, q)
        fused = decode_step_fused(comp, q, codecs)
        assert fused.traffic.vision_bytes * 2 == base.traffic.vision_bytes
        assert fused.traffic.text_bytes == base.traffic.text_bytes

    def test_mlp2_codec_rejected(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng)
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        from seqkv.keycodec import KeyCodec
        from seqkv.kvmodel import LayerCodec

        bad = []
        for c in codecs:
            k, n, h = c.k, c.n, c.heads
            weights = {
                "w1": np.zeros((h, n, k), np.float32),
                "b1": np.zeros((h, n), np.float32),
                "w2": np.zeros((h, n, n), np.float32),
                "b2": np.zeros((h, n), np.float32),
            }
            key = KeyCodec(mask=c.key.mask, kind="mlp2", weights=weights, n=n)
            bad.append(LayerCodec(key=key, value=c.value, retention=c.retention))
        with pytest.raises(UnsupportedPathError):
            decode_step_fused(cache, q, bad)


class TestStatic:
    def test_identity_matches_baseline(self, rng):
        shape, text, vision, _, _, q = build(rng, retention=1.0)
        ident = make_identity_codecs(shape.layers, shape.kv_heads, 12)
        full = new_cache(shape, text, vision, None, None, mode="full")
        comp = prefill_compressed(shape, text, vision, make_schedule(2, 1, 1), ident)
        base = decode_step_baseline(full, q)
        static = decode_step_static(comp, q)
        assert rel_err(base.outputs, static.outputs) < 1e-5

    def test_weights_scattered_to_token_slots(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng, retention=0.5, n=12, c=2)
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        res = decode_step_static(cache, q)
        w = res.weights[0]
        assert w.shape[1] == res.layout.total
        vis = w[:, res.layout.vision_slice]
        mask = codecs[0].key.mask
        dropped = np.setdiff1d(np.arange(12), mask)
        assert np.all(vis[:, dropped] == 0)
        assert np.all(vis[:, mask] > 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_singleton_vision_segment(self, rng):
        shape = ModelShape(layers=1, kv_heads=1, query_heads=1, head_dim=4)
        text, vision = random_cache_inputs(rng, shape, n=2, text_len=0)
        codecs = random_linear_codecs(rng, 1, 1, 2, 0.5)  # keeps 1 of 2 rows
        cache = prefill_compressed(shape, text, vision, make_schedule(1, 0.5, 0.5), codecs)
        res = decode_step_static(cache, random_queries(rng, shape))
        np.testing.assert_allclose(res.weights[0].sum(axis=1), 1.0, atol=1e-6)

    def test_fidelity_below_reconstruct_with_trained_codecs(self, rng):
        # ordering only holds for codecs that actually reconstruct well, so
        # train on a redundant fixture instead of using random weights
        from seqkv import synth
        from seqkv.analysis import attention_fidelity
        from seqkv.keycodec import TrainConfig, train_key_codec
        from seqkv.kvmodel import LayerCodec
        from seqkv.valuecodec import fit_value_pca

        base_profile = synth.SynthProfile(
            seed=5, n=16, d_head=8, kv_heads=2, layers=1, key_cosine=0.95, key_rank=4
        )
        kv = [synth.gen_visual_kv(
            synth.SynthProfile(**{**base_profile.__dict__, "seed": s})
        ) for s in range(5)]
        keys = np.stack([k[0] for k, _ in kv])       # (S, H, n, d)
        values = np.stack([v[0] for _, v in kv])
        retention = 0.4
        key_codec, _ = train_key_codec(
            keys[:-1], retention, TrainConfig(epochs=200, seed=0)
        )
        value_pca = fit_value_pca(values[:-1], retention)
        codecs = [LayerCodec(key=key_codec, value=value_pca, retention=retention)]

        shape = ModelShape(layers=1, kv_heads=2, query_heads=2, head_dim=8)
        text = [(np.zeros((2, 0, 8), np.float32), np.zeros((2, 0, 8), np.float32))]
        vision = [[(keys[-1], values[-1])]]
        schedule = make_schedule(1, retention, retention)
        full = new_cache(shape, text, vision, None, None, mode="full")
        comp = prefill_compressed(shape, text, vision, schedule, codecs)
        q = random_queries(rng, shape)
        base = decode_step_baseline(full, q)
        rec = decode_step_reconstruct(comp, q, codecs)
        sta = decode_step_static(comp, q)
        f_rec = attention_fidelity(np.stack(base.weights), np.stack(rec.weights))
        f_sta = attention_fidelity(np.stack(base.weights), np.stack(sta.weights))
        assert f_sta.cosine < f_rec.cosine


class TestRunGeneration:
    def trace_for(self, rng, shape, steps):
        return QueryTrace(
            queries=rng.standard_normal(
                (steps, shape.layers, shape.query_heads, shape.head_dim)
            ).astype(np.float32),
            gen_k=rng.standard_normal(
                (steps, shape.layers, shape.kv_heads, shape.head_dim)
            ).astype(np.float32),
            gen_v=rng.standard_normal(
                (steps, shape.layers, shape.kv_heads, shape.head_dim)
            ).astype(np.float32),
        )

    def test_one_step_equals_single_decode(self, rng):
        shape, text, vision, schedule, codecs, _ = build(rng)
        trace = self.trace_for(rng, shape, 1)
        cache_a = prefill_compressed(shape, text, vision, schedule, codecs)
        cache_b = prefill_compressed(shape, text, vision, schedule, codecs)
        gen = run_generation(cache_a, trace, codecs, DecodeConfig(path="fused"))
        single = decode_step_fused(cache_b, trace.queries[0], codecs)
        assert np.array_equal(gen.outputs[0], single.outputs)

    def test_traffic_growth(self, rng):
        shape, text, vision, _, _, _ = build(rng)
        trace = self.trace_for(rng, shape, 5)
        cache = new_cache(shape, text, vision, None, None, mode="full")
        gen = run_generation(cache, trace, None, DecodeConfig(path="baseline_full"))
        vision_bytes = [r.vision_bytes for r in gen.reports]
        gen_bytes = [r.generated_bytes for r in gen.reports]
        assert len(set(vision_bytes)) == 1
        per_tok = 2 * shape.layers * shape.kv_heads * shape.head_dim * shape.kv_bytes
        assert gen_bytes == [per_tok * t for t in range(5)]

    def test_fused_equals_reconstruct_every_step(self, rng):
        shape, text, vision, schedule, codecs, _ = build(rng, retention=0.5)
        trace = self.trace_for(rng, shape, 4)
        cache_a = prefill_compressed(shape, text, vision, schedule, codecs)
        cache_b = prefill_compressed(shape, text, vision, schedule, codecs)
        fus = run_generation(cache_a, trace, codecs, DecodeConfig(path="fused"))
        rec = run_generation(cache_b, trace, codecs, DecodeConfig(path="reconstruct"))
        for t in range(4):
            assert rel_err(rec.outputs[t], fus.outputs[t]) < 1e-5

    def test_joint_softmax_rows_sum_to_one(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng)
        for path, cache in [
            ("baseline_full", new_cache(shape, text, vision, None, None, mode="full")),
            ("reconstruct", prefill_compressed(shape, text, vision, schedule, codecs)),
            ("fused", prefill_compressed(shape, text, vision, schedule, codecs)),
            ("static_compressed", prefill_compressed(shape, text, vision, schedule, codecs)),
        ]:
            trace = self.trace_for(rng, shape, 2)
            gen = run_generation(cache, trace, codecs, DecodeConfig(path=path))
            for step in gen.step_weights:
                for w in step:
                    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


class TestMultiImage:
    def test_independent_segment_compression(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng, segments=2, retention=0.5, n=12)
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        for lc in cache.layers:
            assert len(lc.vision) == 2
            for seg in lc.vision:
                assert seg.keys.shape[1] == 6
        assert cache.layers[0].vision[0].keys.tobytes() != cache.layers[0].vision[1].keys.tobytes()

    def test_fused_reconstruct_agree_with_two_images(self, rng):
        shape, text, vision, schedule, codecs, q = build(rng, segments=2, retention=0.25, n=16)
        cache = prefill_compressed(shape, text, vision, schedule, codecs)
        rec = decode_step_reconstruct(cache, q, codecs)
        fus = decode_step_fused(cache, q, codecs)
        assert rel_err(rec.outputs, fus.outputs) < 1e-5
