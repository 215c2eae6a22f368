import numpy as np
import pytest

from specdesk.cache import KVCache
from specdesk.errors import CapacityError, ParameterError, ShapeError, StateError
from specdesk.model import (ModelSpec, decode_step, derive_draft, load_weights,
                            next_token_dist, prefill, rope_apply, save_weights)
from specdesk.modelgen import random_weights


def small_model(seed=0, n_layers=2, vocab=17, n_heads=2, d_head=8, max_pos=512):
    spec = ModelSpec(n_layers=n_layers, n_heads=n_heads, d_model=n_heads * d_head,
                     d_head=d_head, vocab=vocab, max_pos=max_pos)
    return spec, random_weights(spec, seed)


def fresh_cache(spec):
    return KVCache(spec.n_layers, spec.n_heads, spec.d_head)


class TestRope:
    def test_position_zero_identity(self):
        x = np.random.default_rng(0).standard_normal(8)
        assert np.allclose(rope_apply(x, 0, 10000.0), x)

    def test_pair_norm_preserved(self):
        x = np.random.default_rng(1).standard_normal(16)
        y = rope_apply(x, 37, 10000.0)
        for i in range(0, 16, 2):
            before = np.hypot(x[i], x[i + 1])
            after = np.hypot(y[i], y[i + 1])
            assert abs(before - after) < 1e-12

    def test_closed_form_position_5(self):
        # Oracle: direct sin/cos of the rotation angle per pair.
        d, base, pos = 8, 10000.0, 5
        x = np.zeros(d)
        x[0::2] = 1.0  # unit in each pair's first component
        got = rope_apply(x, pos, base)
        for i in range(d // 2):
            theta = base ** (-2.0 * i / d) * pos
            assert got[2 * i] == pytest.approx(np.cos(theta), abs=1e-12)
            assert got[2 * i + 1] == pytest.approx(np.sin(theta), abs=1e-12)

    def test_negative_position(self):
        with pytest.raises(ParameterError):
            rope_apply(np.zeros(4), -1, 10000.0)


class TestPrefillDecodeEquivalence:
    def test_single_token_exact(self):
        spec, w = small_model()
        c1, c2 = fresh_cache(spec), fresh_cache(spec)
        a = prefill(spec, w, [3], c1)
        b = decode_step(spec, w, [3], c2, positions=np.array([0]))
        assert np.array_equal(a.logits, b.logits)

    def test_incremental_matches_full_recompute(self):
        spec, w = small_model(seed=5)
        tokens = [1, 4, 2, 9, 16, 0, 7]
        c1 = fresh_cache(spec)
        prefill(spec, w, tokens[:-1], c1)
        inc = decode_step(spec, w, [tokens[-1]], c1,
                          positions=np.array([len(tokens) - 1]))
        c2 = fresh_cache(spec)
        full = prefill(spec, w, tokens, c2)
        assert np.max(np.abs(inc.logits[0] - full.logits[-1])) < 1e-9

    def test_capture_flag_contract(self):
        spec, w = small_model()
        out = prefill(spec, w, [1, 2, 3], fresh_cache(spec), capture_scores=False)
        assert out.last_layer_attn is None

    def test_prefill_requires_empty_cache(self):
        spec, w = small_model()
        cache = fresh_cache(spec)
        prefill(spec, w, [1], cache)
        with pytest.raises(StateError):
            prefill(spec, w, [2], cache)

    def test_prefill_capacity(self):
        spec, w = small_model(max_pos=8)
        with pytest.raises(CapacityError):
            prefill(spec, w, list(range(9)) + [0], fresh_cache(spec))

    def test_kv_incremental_random_sequences(self):
        # Property: incremental decoding == full-sequence recomputation.
        rng = np.random.default_rng(11)
        for trial in range(10):
            spec, w = small_model(seed=trial, n_layers=int(rng.integers(1, 4)))
            n = int(rng.integers(2, 40))
            tokens = rng.integers(0, spec.vocab, n).tolist()
            c1 = fresh_cache(spec)
            got = np.empty((n, spec.vocab))
            got[0] = prefill(spec, w, tokens[:1], c1).logits[0]
            for t in range(1, n):
                got[t] = decode_step(spec, w, [tokens[t]], c1,
                                     positions=np.array([t])).logits[0]
            want = prefill(spec, w, tokens, fresh_cache(spec)).logits
            assert np.max(np.abs(got - want)) < 1e-9


class TestDecodeStep:
    def test_empty_block_rejected(self):
        spec, w = small_model()
        with pytest.raises(ShapeError):
            decode_step(spec, w, [], fresh_cache(spec), positions=np.array([]))

    def test_mask_row_mismatch(self):
        spec, w = small_model()
        cache = fresh_cache(spec)
        prefill(spec, w, [1], cache)
        with pytest.raises(ShapeError):
            decode_step(spec, w, [1, 2], cache, tree_mask=np.ones((3, 3), bool),
                        positions=np.array([1, 1]))

    def test_chain_mask_equals_sequential(self):
        spec, w = small_model(seed=3)
        prompt = [2, 5, 1]
        chain = [4, 0, 3]
        c1 = fresh_cache(spec)
        prefill(spec, w, prompt, c1)
        mask = np.tril(np.ones((3, 3), bool))
        batch = decode_step(spec, w, chain, c1, tree_mask=mask,
                            positions=np.arange(3, 6))
        c2 = fresh_cache(spec)
        prefill(spec, w, prompt, c2)
        seq = np.stack([
            decode_step(spec, w, [chain[i]], c2, positions=np.array([3 + i])).logits[0]
            for i in range(3)
        ])
        assert np.max(np.abs(batch.logits - seq)) < 1e-9

    def test_capture_scores_normalized(self):
        spec, w = small_model()
        cache = fresh_cache(spec)
        prefill(spec, w, list(range(8)), cache)
        out = decode_step(spec, w, [3], cache, positions=np.array([8]),
                          capture_scores=True)
        row = out.last_layer_attn[0]
        assert row.shape == (9,)
        assert abs(row.sum() - 1.0) < 1e-6
        assert np.all(row >= 0)

    def test_masked_positions_exactly_zero(self):
        spec, w = small_model(seed=9)
        cache = fresh_cache(spec)
        prefill(spec, w, [1, 2], cache)
        # Two siblings: neither sees the other.
        mask = np.eye(2, dtype=bool)
        out = decode_step(spec, w, [5, 6], cache, tree_mask=mask,
                          positions=np.array([2, 2]), capture_scores=True)
        attn = out.last_layer_attn
        assert attn[0, 3] == 0.0  # row 0 never attends to sibling column
        assert attn[1, 2] == 0.0

    def test_hybrid_chunked_path_matches_monolithic(self):
        spec, w = small_model(seed=13)
        tokens = list(np.random.default_rng(4).integers(0, 17, 50))
        c1, c2 = fresh_cache(spec), fresh_cache(spec)
        prefill(spec, w, tokens, c1)
        prefill(spec, w, tokens, c2)
        mono = decode_step(spec, w, [3, 1], c1, positions=np.array([50, 51]),
                           capture_scores=True)
        hyb = decode_step(spec, w, [3, 1], c2, positions=np.array([50, 51]),
                          capture_scores=True, kv_chunk=7)
        assert np.max(np.abs(mono.logits - hyb.logits)) < 1e-9
        assert np.max(np.abs(mono.last_layer_attn - hyb.last_layer_attn)) < 1e-9


class TestDeriveDraft:
    def test_rejects_full_depth(self):
        spec, w = small_model(n_layers=2)
        with pytest.raises(ParameterError):
            derive_draft(spec, w, 2)
        with pytest.raises(ParameterError):
            derive_draft(spec, w, 0)

    def test_shares_embeddings(self):
        spec, w = small_model(n_layers=2)
        dspec, dw = derive_draft(spec, w, 1)
        assert dspec.n_layers == 1
        assert dw.embed is w.embed
        assert dw.unembed is w.unembed
        assert dw.layers[0] is w.layers[0]

    def test_derived_beats_random_draft_on_acceptance(self):
        # Oracle: A/B greedy-agreement measurement over 2000 steps.
        spec, w = small_model(seed=21, n_layers=2, vocab=29, max_pos=4096)
        derived_spec, derived_w = derive_draft(spec, w, 1)
        rand_w = random_weights(derived_spec, seed=999)

        def agreement(draft_w):
            tc = fresh_cache(spec)
            dc = fresh_cache(derived_spec)
            tok = 1
            t_logits = prefill(spec, w, [tok], tc).logits[-1]
            d_logits = prefill(derived_spec, draft_w, [tok], dc).logits[-1]
            agree = 0
            for pos in range(1, 2001):
                t_next = int(np.argmax(t_logits))
                d_next = int(np.argmax(d_logits))
                agree += t_next == d_next
                t_logits = decode_step(spec, w, [t_next], tc,
                                       positions=np.array([pos])).logits[-1]
                d_logits = decode_step(derived_spec, draft_w, [t_next], dc,
                                       positions=np.array([pos])).logits[-1]
            return agree / 2000

    # Derived draft shares the first layer and output head with the target.
        assert agreement(derived_w) > agreement(rand_w)


class TestNextTokenDist:
    def test_greedy_is_argmax_onehot(self):
        p = next_token_dist(np.array([0.1, 3.0, -1.0]), 0.0)
        assert np.array_equal(p, np.array([0.0, 1.0, 0.0]))

    def test_temperature_softmax(self):
        p = next_token_dist(np.array([1.0, 2.0]), 0.5)
        assert abs(p.sum() - 1.0) < 1e-12
        assert p[1] > p[0]


class TestWeightFiles:
    def test_roundtrip(self, tmp_path):
        spec, w = small_model(seed=2)
        path = str(tmp_path / "m.bin")
        save_weights(path, spec, w)
        spec2, w2 = load_weights(path)
        assert spec2 == spec
        assert np.array_equal(w2.embed, w.embed)
        assert np.array_equal(w2.layers[1].w_out, w.layers[1].w_out)

    def test_same_seed_byte_identical(self, tmp_path):
        spec, _ = small_model()
        from specdesk.modelgen import gen_model

        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        gen_model(p1, "random", 7, spec=spec)
        gen_model(p2, "random", 7, spec=spec)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_header_validates_shapes(self, tmp_path):
        spec, w = small_model()
        path = str(tmp_path / "m.bin")
        save_weights(path, spec, w)
        raw = open(path, "rb").read()
        header, payload = raw.split(b"\n", 1)
        import json

        h = json.loads(header)
        h["spec"]["vocab"] = 99  # now embed shape no longer matches
        broken = json.dumps(h).encode() + b"\n" + payload
        bad = tmp_path / "bad.bin"
        bad.write_bytes(broken)
        with pytest.raises((ShapeError, ValueError)):
            load_weights(str(bad))


class TestModelSpecValidation:
    def test_dims_must_agree(self):
        with pytest.raises(ParameterError):
            ModelSpec(n_layers=1, n_heads=2, d_model=30, d_head=8, vocab=4, max_pos=16)

    def test_vocab_floor(self):
        with pytest.raises(ParameterError):
            ModelSpec(n_layers=1, n_heads=1, d_model=8, d_head=8, vocab=1, max_pos=16)
