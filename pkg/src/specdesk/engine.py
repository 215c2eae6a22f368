"""Generation session: prefill, then retrieval-update / draft / verify steps.

The target always runs a full cache; only the draft cache is subject to a
policy. The draft prefills on all but the last prompt token so that every
step, including the first, drafts from a post-update cache: the tokens a
step commits are appended to the draft cache at the start of the next
step's drafting, which also yields the first proposal distribution.

Attention scores for retrieval come from the most recent verification
(deepest accepted token's last-layer row, root row as fallback), sliced to
the prefix and renormalized. The first update fires immediately after
prefill from the prefill's last-token row.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cache import CachePolicy, FullPolicy, KVCache, RetrievalPolicy, StreamingPolicy
from .drafting import TreeBudget, draft_chain, draft_tree
from .errors import InternalError, ParameterError
from .metrics import ProposalLog, natural_divergence, shannon_entropy
from .model import ModelSpec, Weights, next_token_dist, prefill
from .retrieval import RetrievalState, maybe_update
from .tensor import Rng
from .verification import VerifyOutcome, extract_scores, verify_chain, verify_tree


@dataclass
class StepReport:
    step: int
    drafted: int
    accepted: int
    used_bonus: bool  # False => correction token
    tree_nodes: int  # 0 for chain steps
    retrieval_update: bool
    draft_ms: float
    verify_ms: float
    update_ms: float
    divergence: list[float] = field(default_factory=list)


@dataclass
class SessionResult:
    output_tokens: list[int]
    steps: list[StepReport]
    prefill_s: float
    wall_s: float
    proposals: list[ProposalLog]
    entropy_accept: list[tuple[float, bool]]
    max_draft_prefix_live: int
    draft_cache_len_by_step: list[int]


class Session:
    """One generation run; owns both caches and the RNG."""

    def __init__(self, target_spec: ModelSpec, target_weights: Weights,
                 draft_spec: ModelSpec, draft_weights: Weights,
                 policy: CachePolicy, drafting: str = "chain", k: int = 4,
                 budget: TreeBudget | None = None, temperature: float = 0.0,
                 seed: int = 0, hta_chunk: int | None = 256):
        if drafting not in ("chain", "tree"):
            raise ParameterError(f"unknown drafting mode: {drafting!r}")
        if drafting == "tree" and budget is None:
            budget = TreeBudget(max_nodes=50, max_depth=10, expand_threshold=0.7)
        self.target_spec, self.target_weights = target_spec, target_weights
        self.draft_spec, self.draft_weights = draft_spec, draft_weights
        self.policy = policy
        self.drafting = drafting
        self.k = k
        self.budget = budget
        self.temperature = temperature
        self.rng = Rng(seed)
        self.hta_chunk = hta_chunk

    def run(self, prompt, gen_tokens: int) -> SessionResult:
        prompt = [int(t) for t in prompt]
        if len(prompt) < 2:
            raise ParameterError("prompt must have at least 2 tokens")
        t_start = time.perf_counter()
        tspec, tw = self.target_spec, self.target_weights
        dspec, dw = self.draft_spec, self.draft_weights

        target_cache = KVCache(tspec.n_layers, tspec.n_heads, tspec.d_head)
        draft_cache = KVCache(dspec.n_layers, dspec.n_heads, dspec.d_head)

        t0 = time.perf_counter()
        out = prefill(tspec, tw, prompt, target_cache, capture_scores=True)
        target_cache.seal_prefix()
        root_dist = next_token_dist(out.logits[-1], self.temperature)
        fallback_row = out.last_layer_attn[-1]
        # Draft prefills all but the last prompt token; that token is the
        # first pending commit, so step 1 drafts from a post-update cache.
        prefill(dspec, dw, prompt[:-1], draft_cache)
        draft_cache.seal_prefix()
        prefill_s = time.perf_counter() - t0

        prefix_len = len(prompt) - 1  # chunked document prefix, both caches
        retr = None
        if isinstance(self.policy, RetrievalPolicy):
            retr = RetrievalState.from_policy(self.policy)
        elif isinstance(self.policy, StreamingPolicy):
            draft_cache.evict_streaming(self.policy.sink, self.policy.recent)
        elif not isinstance(self.policy, FullPolicy):
            raise ParameterError(f"unknown cache policy: {self.policy!r}")

        committed = list(prompt)
        scores = extract_scores(fallback_row, prefix_len)
        steps: list[StepReport] = []
        proposals: list[ProposalLog] = []
        entropy_accept: list[tuple[float, bool]] = []
        max_prefix_live = 0
        cache_len_by_step: list[int] = []
        step_idx = 0

        while len(committed) - len(prompt) < gen_tokens:
            step_idx += 1
            t0 = time.perf_counter()
            updated = False
            if retr is not None:
                updated = maybe_update(retr, scores, draft_cache)
                if updated:
                    bound = retr.top_k * retr.chunk_size + retr.sink
                    if draft_cache.prefix_live_count > bound:
                        raise InternalError(
                            f"draft prefix cache {draft_cache.prefix_live_count} "
                            f"exceeds working bound {bound}"
                        )
            update_ms = (time.perf_counter() - t0) * 1e3
            max_prefix_live = max(max_prefix_live, draft_cache.prefix_live_count)

            # Sync the draft cache with tokens committed by earlier steps.
            pending = committed[draft_cache.world_len:]
            if not pending:
                raise InternalError("draft cache is ahead of committed tokens")

            t0 = time.perf_counter()
            n_before = len(committed)
            if self.drafting == "chain":
                chain = draft_chain(dspec, dw, draft_cache, pending, self.k,
                                    self.temperature, self.rng)
                drafted_n, tree_nodes = len(chain.tokens), 0
            else:
                tree = draft_tree(dspec, dw, draft_cache, pending, self.budget,
                                  self.temperature)
                drafted_n, tree_nodes = tree.size - 1, tree.size
            draft_ms = (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            if self.drafting == "chain":
                outc: VerifyOutcome = verify_chain(
                    tspec, tw, target_cache, chain, root_dist, self.rng,
                    self.temperature, kv_chunk=self.hta_chunk)
            else:
                outc = verify_tree(tspec, tw, target_cache, tree, root_dist,
                                   self.rng, self.temperature,
                                   kv_chunk=self.hta_chunk)
            verify_ms = (time.perf_counter() - t0) * 1e3

            commits = outc.committed
            committed.extend(commits)
            root_dist = outc.next_root_dist

            # Roll the draft cache back to the committed world.
            if self.drafting == "chain":
                draft_cache.truncate(n_before + outc.accepted_count)
            else:
                draft_cache.truncate(n_before)
            if isinstance(self.policy, StreamingPolicy):
                draft_cache.evict_streaming(self.policy.sink, self.policy.recent)

            row = (outc.last_accepted_attn_row
                   if outc.accepted_count >= 1 else fallback_row)
            scores = extract_scores(row, prefix_len)
            fallback_row = outc.last_committed_attn_row

            # Metrics bookkeeping.
            div = []
            for lvl in outc.levels:
                entropy_accept.append((shannon_entropy(lvl.target_dist), lvl.accepted))
                if lvl.proposal_dist is not None:
                    div.append(natural_divergence(lvl.proposal_dist, lvl.target_dist))
            for i, lvl in enumerate(outc.levels):
                if lvl.first_candidate is None or lvl.draft_logits is None:
                    continue
                pos = n_before - len(prompt) + i
                metric = next_token_dist(lvl.draft_logits, 1.0)
                proposals.append(ProposalLog(
                    position=pos, proposed=lvl.first_candidate,
                    committed=lvl.committed,
                    metric_prob=float(metric[lvl.committed])))

            steps.append(StepReport(
                step=step_idx, drafted=drafted_n, accepted=outc.accepted_count,
                used_bonus=outc.bonus_token is not None, tree_nodes=tree_nodes,
                retrieval_update=updated, draft_ms=draft_ms, verify_ms=verify_ms,
                update_ms=update_ms, divergence=div))
            cache_len_by_step.append(draft_cache.length)

        wall_s = time.perf_counter() - t_start
        output = committed[len(prompt):len(prompt) + gen_tokens]
        return SessionResult(
            output_tokens=output, steps=steps, prefill_s=prefill_s,
            wall_s=wall_s, proposals=proposals, entropy_accept=entropy_accept,
            max_draft_prefix_live=max_prefix_live,
            draft_cache_len_by_step=cache_len_by_step)


def greedy_reference(spec: ModelSpec, weights: Weights, prompt,
                     gen_tokens: int) -> list[int]:
    """Target-only greedy decoding, the losslessness oracle."""
    from .model import decode_step

    cache = KVCache(spec.n_layers, spec.n_heads, spec.d_head)
    out = prefill(spec, weights, prompt, cache)
    tokens = []
    logits = out.logits[-1]
    pos = len(prompt)
    for _ in range(gen_tokens):
        tok = int(np.argmax(logits))
        tokens.append(tok)
        step = decode_step(spec, weights, [tok], cache, positions=np.array([pos]))
        logits = step.logits[-1]
        pos += 1
    return tokens
