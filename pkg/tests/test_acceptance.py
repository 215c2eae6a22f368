"""Acceptance gate: one test per criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines live.
Heavy runs (the 8K needle comparison and the 8K/16K document sweep) are
shared across criteria through module-scoped fixtures.
"""

import time

import numpy as np
import pytest

from specdesk.cache import FullPolicy, RetrievalPolicy, StreamingPolicy
from specdesk.config import parse_config
from specdesk.drafting import DraftTree, TreeBudget, TreeNode
from specdesk.engine import Session, greedy_reference
from specdesk.harness import run_experiment
from specdesk.model import ModelSpec, decode_step, derive_draft, prefill
from specdesk.modelgen import random_weights
from specdesk.cache import KVCache
from specdesk.retrieval import chunk_scores, select_top_k
from specdesk.speedup import SpeedupInputs, speedup_model
from specdesk.tensor import Rng
from specdesk.verification import (accept_probability, hybrid_attention,
                                   residual_after_reject, walk_tree)


def report(line: str) -> None:
    print(line, flush=True)


# -- shared heavy runs ---------------------------------------------------------

NEEDLE_GEN = 64
DOC_GEN = 64


@pytest.fixture(scope="module")
def needle_runs():
    runs = {}
    for policy in ("retrieval", "streaming", "full"):
        cfg = parse_config(overrides=[
            "task=needle", f"policy={policy}", "prompt_len=8192",
            f"gen_tokens={NEEDLE_GEN}", "drafting=chain", "k=4", "seed=42",
            "chunk_size=32", "top_k=32", "frequency=4",
        ])
        runs[policy] = run_experiment(cfg)
    return runs


@pytest.fixture(scope="module")
def doc_runs(tmp_path_factory):
    out_root = tmp_path_factory.mktemp("doc_reports")
    runs = {}
    for plen in (8192, 16384):
        for policy in ("retrieval", "streaming", "full"):
            cfg = parse_config(overrides=[
                "task=doc", "weak_match_mass=100", f"policy={policy}",
                f"prompt_len={plen}", f"gen_tokens={DOC_GEN}",
                "drafting=chain", "k=4", "seed=7", "loop_len=15",
                f"out={out_root / f'{policy}_{plen}'}",
            ])
            runs[(policy, plen)] = (run_experiment(cfg),
                                    out_root / f"{policy}_{plen}")
    return runs


# -- criterion 1 ----------------------------------------------------------------

def test_criterion_1_losslessness_exact():
    """50 random configs, temperature 0, 256 tokens, under 5 minutes."""
    start = time.perf_counter()
    rng = Rng(2026).generator
    policies = [FullPolicy(), StreamingPolicy(sink=2, recent=24),
                RetrievalPolicy(chunk_size=8, top_k=3, frequency=2)]
    for trial in range(50):
        vocab = int(rng.integers(16, 65))
        n_layers = int(rng.integers(2, 5))
        d_head = int(rng.choice([8, 16]))
        spec = ModelSpec(n_layers=n_layers, n_heads=2, d_model=2 * d_head,
                         d_head=d_head, vocab=vocab, max_pos=1024)
        w = random_weights(spec, int(rng.integers(0, 2**31)))
        keep = int(rng.integers(1, n_layers))
        dspec, dw = derive_draft(spec, w, keep)
        policy = policies[trial % 3]
        drafting = ["chain", "tree"][trial % 2]
        prompt = rng.integers(0, vocab, 48).tolist()
        sess = Session(spec, w, dspec, dw, policy=policy, drafting=drafting,
                       k=4, budget=TreeBudget(12, 5, 0.6), temperature=0.0,
                       seed=trial, hta_chunk=64)
        got = sess.run(prompt, 256).output_tokens
        want = greedy_reference(spec, w, prompt, 256)
        assert got == want, f"config {trial}: speculative != greedy"
    elapsed = time.perf_counter() - start
    assert elapsed < 300, f"losslessness sweep took {elapsed:.0f}s"
    report(f"ACCEPTANCE 1 PASS: 50/50 random configs token-identical to "
           f"target-only greedy over 256 tokens ({elapsed:.0f}s)")


# -- criterion 2 ----------------------------------------------------------------

def _rand_dist(rng, n, zeros=0):
    x = rng.random(n) + 1e-3
    if zeros:
        x[rng.choice(n, zeros, replace=False)] = 0.0
    return x / x.sum()


def test_criterion_2_losslessness_stochastic():
    """Chain: analytic branch enumeration reproduces the target distribution
    at machine precision. Tree: Monte-Carlo committed-token distribution
    within TV 0.015 at 1e5 trials."""
    rng = np.random.default_rng(8)
    worst = 0.0
    for trial in range(300):
        p = _rand_dist(rng, 8, zeros=trial % 3)
        q = _rand_dist(rng, 8, zeros=(trial + 1) % 3)
        marginal = np.zeros(8)
        for tok in range(8):
            if p[tok] == 0:
                continue
            acc = accept_probability(q, tok, p)
            marginal[tok] += p[tok] * acc
            if acc < 1.0:
                marginal += p[tok] * (1.0 - acc) * residual_after_reject(q, tok, p)
        worst = max(worst, float(np.max(np.abs(marginal - q))))
    assert worst < 1e-14, f"analytic enumeration error {worst}"

    vocab = 6
    q_rows = {i: _rand_dist(rng, vocab) for i in range(5)}
    d_rows = [_rand_dist(rng, vocab) for _ in range(5)]
    nodes = []
    for (token, parent), dist in zip([(0, -1), (2, 0), (4, 0), (1, 1), (5, 1)],
                                     d_rows):
        depth = 0 if parent == -1 else nodes[parent].depth + 1
        nodes.append(TreeNode(token=token, parent=parent, depth=depth,
                              path_logprob=0.0, dist=dist))
        if parent >= 0:
            nodes[parent].children.append(len(nodes) - 1)
    tree = DraftTree(nodes=nodes, root_pos=0)
    trials = 100_000
    counts = np.zeros(vocab)
    walk_rng = Rng(515)
    for _ in range(trials):
        walk = walk_tree(tree, q_rows, walk_rng, temperature=0.9)
        first = walk.accepted[0] if walk.accepted else (
            walk.correction if walk.correction is not None else walk.bonus)
        counts[first] += 1
    tv = 0.5 * float(np.abs(counts / trials - q_rows[0]).sum())
    assert tv <= 0.015, f"tree Monte-Carlo TV {tv}"
    report(f"ACCEPTANCE 2 PASS: chain enumeration max err {worst:.2e}; "
           f"tree Monte-Carlo TV {tv:.4f} <= 0.015 at 1e5 trials")


# -- criterion 3 ----------------------------------------------------------------

def test_criterion_3_hybrid_attention_equivalence():
    """1000 random instances: online merge vs monolithic, < 1e-9."""
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.choice([8, 16]))
        nq = int(rng.integers(1, 6))
        prefix = int(rng.integers(8, 257))
        n_chunks = int(rng.integers(1, 9))
        n_chunks = min(n_chunks, prefix)
        n_tree = int(rng.integers(0, 51))
        ks = rng.standard_normal((prefix, d))
        vs = rng.standard_normal((prefix, d))
        cuts = (np.sort(rng.choice(np.arange(1, prefix), n_chunks - 1,
                                   replace=False))
                if n_chunks > 1 else np.array([], dtype=int))
        bounds = [0, *cuts.tolist(), prefix]
        chunks = [(ks[a:b], vs[a:b]) for a, b in zip(bounds, bounds[1:])]
        q = rng.standard_normal((nq, d))
        tree = mask = None
        if n_tree:
            tree = (rng.standard_normal((n_tree, d)),
                    rng.standard_normal((n_tree, d)))
            mask = rng.random((nq, n_tree)) < 0.5
        out, _ = hybrid_attention(q, chunks, tree, mask)
        # Monolithic oracle.
        if tree is not None:
            kall = np.concatenate([ks, tree[0]])
            vall = np.concatenate([vs, tree[1]])
            full_mask = np.concatenate([np.ones((nq, prefix), bool), mask], axis=1)
        else:
            kall, vall = ks, vs
            full_mask = np.ones((nq, prefix), bool)
        scores = np.where(full_mask, q @ kall.T / np.sqrt(d), -np.inf)
        m = scores.max(axis=1, keepdims=True)
        wts = np.exp(scores - m)
        want = (wts / wts.sum(axis=1, keepdims=True)) @ vall
        worst = max(worst, float(np.max(np.abs(out - want))))
    assert worst < 1e-9, f"hybrid merge max abs diff {worst}"
    report(f"ACCEPTANCE 3 PASS: 1000 hybrid-vs-monolithic instances, "
           f"max abs diff {worst:.2e} < 1e-9")


# -- criterion 4 ----------------------------------------------------------------

def test_criterion_4_kv_incremental_correctness():
    """200 random sequences: incremental logits == full recompute < 1e-9."""
    rng = np.random.default_rng(44)
    worst = 0.0
    for trial in range(200):
        n_layers = int(rng.integers(1, 4))
        vocab = int(rng.integers(8, 33))
        spec = ModelSpec(n_layers=n_layers, n_heads=2, d_model=16, d_head=8,
                         vocab=vocab, max_pos=128)
        w = random_weights(spec, trial)
        n = int(rng.integers(2, 49))
        tokens = rng.integers(0, vocab, n).tolist()
        c1 = KVCache(spec.n_layers, spec.n_heads, spec.d_head)
        got = np.empty((n, vocab))
        got[0] = prefill(spec, w, tokens[:1], c1).logits[0]
        for t in range(1, n):
            got[t] = decode_step(spec, w, [tokens[t]], c1,
                                 positions=np.array([t])).logits[0]
        want = prefill(spec, w, tokens,
                       KVCache(spec.n_layers, spec.n_heads, spec.d_head)).logits
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst < 1e-9, f"incremental-vs-recompute max abs diff {worst}"
    report(f"ACCEPTANCE 4 PASS: 200 random sequences, incremental vs full "
           f"recompute max abs diff {worst:.2e} < 1e-9")


# -- criterion 5 ----------------------------------------------------------------

def test_criterion_5_selection_oracle():
    """1000 random score vectors: chunk means + top-k selection equal the
    brute-force oracle exactly, with ties toward the lower chunk index."""
    rng = np.random.default_rng(55)
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        chunk = int(rng.integers(1, 40))
        k = int(rng.integers(1, 12))
        quantize = bool(rng.integers(0, 2))
        s = rng.random(n)
        if quantize:  # force frequent ties
            s = np.round(s * 4) / 4
        means = chunk_scores(s, chunk)
        expected_means = [float(np.mean(s[i:i + chunk]))
                          for i in range(0, n, chunk)]
        assert np.array_equal(means, np.array(expected_means))
        got = select_top_k(means, k).tolist()
        ranked = sorted(range(len(means)),
                        key=lambda i: (-means[i], i))[:min(k, len(means))]
        assert got == sorted(ranked)
    report("ACCEPTANCE 5 PASS: 1000 random score vectors match the "
           "brute-force mean/argsort oracle exactly")


# -- criterion 6 ----------------------------------------------------------------

def test_criterion_6_speedup_calculator():
    """Worked examples exact to 1e-12; monotone in tau and in draft latency
    over 1e4 random inputs."""
    r = speedup_model(SpeedupInputs(tau=2, d=4, t_draft=0.1, t_target=1.0,
                                    t_verify=1.0))
    assert abs(r.ratio - 0.7) < 1e-12
    r = speedup_model(SpeedupInputs(tau=4, d=4, t_draft=1e-15, t_target=1.0,
                                    t_verify=1.0))
    assert abs(r.ratio - 0.25) < 1e-12
    r = speedup_model(SpeedupInputs(tau=1, d=1, t_draft=1.0, t_target=1.0,
                                    t_verify=1.0))
    assert abs(r.ratio - 2.0) < 1e-12
    rng = np.random.default_rng(66)
    for _ in range(10_000):
        tau = float(rng.uniform(1, 40))
        d = int(rng.integers(1, 32))
        td, tt, tv = rng.uniform(1e-6, 5, 3)
        base = speedup_model(SpeedupInputs(tau=tau, d=d, t_draft=td,
                                           t_target=tt, t_verify=tv))
        up = speedup_model(SpeedupInputs(tau=tau + rng.uniform(0.01, 5), d=d,
                                         t_draft=td, t_target=tt, t_verify=tv))
        slow = speedup_model(SpeedupInputs(tau=tau, d=d,
                                           t_draft=td + rng.uniform(1e-6, 1),
                                           t_target=tt, t_verify=tv))
        assert up.speedup > base.speedup
        assert slow.speedup < base.speedup
    report("ACCEPTANCE 6 PASS: calculator examples exact to 1e-12; "
           "monotonicity holds over 1e4 random inputs")


# -- criterion 7 ----------------------------------------------------------------

def test_criterion_7_needle_analogue(needle_runs):
    """8K needle task, chunk 32 / top-k 32 / frequency 4: retrieval draft
    accuracy at least 2x streaming's and at least 0.8x full's."""
    start = time.perf_counter()
    acc = {}
    for policy, run in needle_runs.items():
        n = run.report.needle
        assert n is not None, f"{policy}: needle not reached"
        assert n.reproduced, f"{policy}: output does not reproduce the needle"
        acc[policy] = n.accuracy
    assert acc["retrieval"] >= 2 * acc["streaming"], acc
    assert acc["retrieval"] >= 0.8 * acc["full"], acc
    elapsed = time.perf_counter() - start
    assert elapsed < 900
    report(f"ACCEPTANCE 7 PASS: needle draft accuracy retrieval={acc['retrieval']:.3f} "
           f">= 2x streaming={acc['streaming']:.3f} and >= 0.8x full={acc['full']:.3f}")


# -- criterion 8 ----------------------------------------------------------------

def test_criterion_8_tau_ordering(doc_runs):
    """8K and 16K documents: tau(retrieval) > tau(streaming) > tau(full);
    retrieval's draft wall time per step at most full's; reports emitted
    with the exact schemas."""
    import csv as csv_mod
    import json

    for plen in (8192, 16384):
        taus = {}
        draft_ms = {}
        for policy in ("retrieval", "streaming", "full"):
            run, out_dir = doc_runs[(policy, plen)]
            taus[policy] = run.report.tau
            steps = run.result.steps
            draft_ms[policy] = sum(s.draft_ms for s in steps) / len(steps)
            payload = json.loads((out_dir / "summary.json").read_text())
            assert set(payload.keys()) == {"config", "tau", "tokens_per_s",
                                           "total_tokens", "wall_s", "phase_s",
                                           "divergence_by_pos", "acceptance",
                                           "needle"}
            with open(out_dir / "steps.csv") as f:
                rows = list(csv_mod.reader(f))
            assert rows[0] == ["step", "drafted", "accepted", "tree_nodes",
                               "retrieval_update", "draft_ms", "verify_ms",
                               "update_ms"]
            assert len(rows) - 1 == len(steps)
        assert taus["retrieval"] > taus["streaming"] > taus["full"], (plen, taus)
        assert draft_ms["retrieval"] <= draft_ms["full"], (plen, draft_ms)
        report(f"ACCEPTANCE 8 PASS ({plen} tokens): tau retrieval="
               f"{taus['retrieval']:.2f} > streaming={taus['streaming']:.2f} "
               f"> full={taus['full']:.2f}; draft ms/step "
               f"{draft_ms['retrieval']:.1f} <= {draft_ms['full']:.1f}")


# -- criterion 9 ----------------------------------------------------------------

def test_criterion_9_working_cache_bound(needle_runs, doc_runs):
    """After every retrieval update the draft prefix cache stays within
    top_k * chunk_size, independent of document length up to 16K."""
    bound = 32 * 32
    checked = []
    run = needle_runs["retrieval"]
    assert run.report.max_draft_prefix_live <= bound
    checked.append(("needle-8192", run.report.max_draft_prefix_live))
    for plen in (8192, 16384):
        run, _ = doc_runs[("retrieval", plen)]
        assert run.report.max_draft_prefix_live <= bound
        checked.append((f"doc-{plen}", run.report.max_draft_prefix_live))
    detail = ", ".join(f"{name}: {v}" for name, v in checked)
    report(f"ACCEPTANCE 9 PASS: draft prefix cache <= {bound} after every "
           f"update ({detail})")
