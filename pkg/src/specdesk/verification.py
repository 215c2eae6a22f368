"""Target-side verification: lossless accept/reject/correct for chains and
trees, hybrid chunked+tree attention, and attention-score extraction.

Acceptance follows the standard ratio rule ``u < min(1, q(x)/p(x))``
against the proposal distribution each candidate was actually drawn from.
Chain candidates are sampled from the recorded draft distributions; tree
children are deterministic top-probability picks, i.e. point-mass
proposals, so a rejected child simply has its token's mass removed from the
residual before the next sibling is tried. Either way each attempt is one
exact rejection-sampling round, so the committed token is distributed as
the target distribution.

After the walk the speculative rows are rolled back and the newly committed
tokens are decoded once more with score capture; that pass supplies the
next root distribution and the last-layer attention rows, and it keeps the
cache position set equal to the committed tokens after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import KVCache
from .drafting import ChainDraft, DraftTree, flatten_tree
from .errors import InternalError, ShapeError, StateError
from .model import ModelSpec, Weights, decode_step, next_token_dist
from .tensor import Rng, sample_categorical
from . import attn


@dataclass
class LevelRecord:
    """Per-depth record of the verification walk (for metrics)."""

    target_dist: np.ndarray  # q at this level, temperature-adjusted
    proposal_dist: np.ndarray | None  # draft dist that generated this level
    first_candidate: int | None  # draft's top proposal at this level
    committed: int
    accepted: bool
    draft_logits: np.ndarray | None = None  # raw draft logits at this level


@dataclass
class VerifyOutcome:
    accepted_tokens: list[int]
    accepted_count: int
    correction_token: int | None
    bonus_token: int | None
    target_rows: list[np.ndarray]  # committed-path target distributions
    last_accepted_attn_row: np.ndarray | None
    last_committed_attn_row: np.ndarray | None
    next_root_dist: np.ndarray
    levels: list[LevelRecord] = field(default_factory=list)

    def __post_init__(self):
        if (self.correction_token is None) == (self.bonus_token is None):
            raise InternalError("exactly one of correction/bonus must be present")

    @property
    def committed(self) -> list[int]:
        extra = self.correction_token if self.correction_token is not None else self.bonus_token
        return self.accepted_tokens + [extra]


# -- accept / residual machinery ----------------------------------------------

def accept_probability(residual: np.ndarray, token: int,
                       proposal: np.ndarray | None) -> float:
    """min(1, q(x)/p(x)); a point-mass proposal (None) gives q(x) directly."""
    r = float(residual[token])
    if proposal is None:
        return min(1.0, r)
    p = float(proposal[token])
    if p <= 0.0:
        raise InternalError("candidate drafted with zero proposal probability")
    return min(1.0, r / p)


def residual_after_reject(residual: np.ndarray, token: int,
                          proposal: np.ndarray | None) -> np.ndarray:
    """Residual target distribution after rejecting one candidate."""
    if proposal is None:
        out = residual.copy()
        out[token] = 0.0
    else:
        out = np.maximum(residual - proposal, 0.0)
    s = out.sum()
    if s <= 0.0:
        raise InternalError("residual distribution vanished after rejection")
    return out / s


def _attempt(residual: np.ndarray, token: int, proposal: np.ndarray | None,
             rng: Rng, temperature: float) -> bool:
    p = accept_probability(residual, token, proposal)
    if temperature == 0:
        return p >= 1.0
    return rng.uniform() < p


def _draw(dist: np.ndarray, rng: Rng, temperature: float) -> int:
    if temperature == 0:
        return int(np.argmax(dist))
    return sample_categorical(dist, rng)


@dataclass
class WalkResult:
    accepted: list[int]
    correction: int | None
    bonus: int | None
    target_rows: list[np.ndarray]
    levels: list[LevelRecord]


def walk_chain(tokens: list[int], proposals: list[np.ndarray],
               rows: list[np.ndarray], root_dist: np.ndarray, rng: Rng,
               temperature: float,
               logits: list[np.ndarray] | None = None) -> WalkResult:
    """Pure accept/reject/correct walk over a drafted chain.

    ``rows[i]`` is the target distribution after drafted token i; the bonus
    is sampled from the last row when everything is accepted.
    """
    accepted: list[int] = []
    target_rows: list[np.ndarray] = []
    levels: list[LevelRecord] = []
    correction = None
    bonus = None
    q_cur = root_dist
    for i, tok in enumerate(tokens):
        ok = _attempt(q_cur, tok, proposals[i], rng, temperature)
        rec = LevelRecord(target_dist=q_cur, proposal_dist=proposals[i],
                          first_candidate=tok, committed=-1, accepted=ok,
                          draft_logits=logits[i] if logits else None)
        levels.append(rec)
        target_rows.append(q_cur)
        if ok:
            accepted.append(tok)
            rec.committed = tok
            q_cur = rows[i]
        else:
            residual = residual_after_reject(q_cur, tok, proposals[i])
            correction = _draw(residual, rng, temperature)
            rec.committed = correction
            break
    if correction is None:
        bonus = _draw(q_cur, rng, temperature)
        target_rows.append(q_cur)
        levels.append(LevelRecord(target_dist=q_cur, proposal_dist=None,
                                  first_candidate=None, committed=bonus,
                                  accepted=False))
    return WalkResult(accepted, correction, bonus, target_rows, levels)


def walk_tree(tree: DraftTree, rows: dict[int, np.ndarray], rng: Rng,
              temperature: float) -> WalkResult:
    """Pure walk from the root: try children in draft-probability order,
    removing each rejected child's mass from the residual; sample the
    correction from the final residual, or the bonus at an accepted leaf."""
    accepted: list[int] = []
    target_rows: list[np.ndarray] = []
    levels: list[LevelRecord] = []
    correction = None
    bonus = None
    node = 0
    while True:
        q_cur = rows[node]
        parent_dist = tree.nodes[node].dist
        children = sorted(tree.children_of(node),
                          key=lambda c: (-float(parent_dist[tree.nodes[c].token]), c))
        if not children:
            bonus = _draw(q_cur, rng, temperature)
            target_rows.append(q_cur)
            levels.append(LevelRecord(target_dist=q_cur, proposal_dist=parent_dist,
                                      first_candidate=None, committed=bonus,
                                      accepted=False,
                                      draft_logits=tree.nodes[node].logits))
            break
        residual = q_cur
        chosen = None
        for c in children:
            tok = tree.nodes[c].token
            if _attempt(residual, tok, None, rng, temperature):
                chosen = c
                break
            residual = residual_after_reject(residual, tok, None)
        first = tree.nodes[children[0]].token
        target_rows.append(q_cur)
        if chosen is None:
            correction = _draw(residual, rng, temperature)
            levels.append(LevelRecord(target_dist=q_cur, proposal_dist=parent_dist,
                                      first_candidate=first, committed=correction,
                                      accepted=False,
                                      draft_logits=tree.nodes[node].logits))
            break
        accepted.append(tree.nodes[chosen].token)
        levels.append(LevelRecord(target_dist=q_cur, proposal_dist=parent_dist,
                                  first_candidate=first,
                                  committed=tree.nodes[chosen].token,
                                  accepted=True,
                                  draft_logits=tree.nodes[node].logits))
        node = chosen
    return WalkResult(accepted, correction, bonus, target_rows, levels)


# -- chain ---------------------------------------------------------------------

def verify_chain(spec: ModelSpec, weights: Weights, cache: KVCache,
                 draft: ChainDraft, root_dist: np.ndarray, rng: Rng,
                 temperature: float, kv_chunk: int | None = None) -> VerifyOutcome:
    """Verify a drafted chain in one masked decode, then commit."""
    if len(draft.tokens) != len(draft.dists):
        raise ShapeError("drafted tokens and distributions disagree in length")
    committed_before = cache.world_len
    k = len(draft.tokens)
    out = decode_step(spec, weights, draft.tokens, cache,
                      positions=np.arange(committed_before, committed_before + k),
                      kv_chunk=kv_chunk)
    rows = [next_token_dist(out.logits[i], temperature) for i in range(k)]
    walk = walk_chain(draft.tokens, draft.dists, rows, root_dist, rng,
                      temperature, logits=draft.logits)
    return _commit(spec, weights, cache, committed_before, walk, temperature, kv_chunk)


# -- tree ------------------------------------------------------------------------

def verify_tree(spec: ModelSpec, weights: Weights, cache: KVCache,
                tree: DraftTree, root_dist: np.ndarray, rng: Rng,
                temperature: float, kv_chunk: int | None = None) -> VerifyOutcome:
    """Verify a draft tree in one masked decode, then commit the surviving path."""
    committed_before = cache.world_len
    if tree.root_pos != committed_before - 1:
        raise StateError(
            f"tree root position {tree.root_pos} does not match cache ({committed_before - 1})"
        )
    tokens, mask, positions = flatten_tree(tree)
    order = sorted(range(tree.size), key=lambda i: (tree.nodes[i].depth, i))
    rows: dict[int, np.ndarray] = {0: root_dist}
    if tree.size > 1:
        sub = [row for row, idx in enumerate(order) if idx != 0]
        out = decode_step(spec, weights, [tokens[r] for r in sub], cache,
                          tree_mask=mask[np.ix_(sub, sub)],
                          positions=positions[sub], kv_chunk=kv_chunk)
        for r_new, r_old in enumerate(sub):
            rows[order[r_old]] = next_token_dist(out.logits[r_new], temperature)
    walk = walk_tree(tree, rows, rng, temperature)
    return _commit(spec, weights, cache, committed_before, walk, temperature, kv_chunk)


# -- commit ---------------------------------------------------------------------

def _commit(spec: ModelSpec, weights: Weights, cache: KVCache,
            committed_before: int, walk: WalkResult,
            temperature: float, kv_chunk: int | None) -> VerifyOutcome:
    """Roll back speculation, append the committed tokens with score capture."""
    cache.truncate(committed_before)
    extra = walk.correction if walk.correction is not None else walk.bonus
    commit_tokens = walk.accepted + [extra]
    out = decode_step(spec, weights, commit_tokens, cache,
                      positions=np.arange(committed_before,
                                          committed_before + len(commit_tokens)),
                      capture_scores=True, kv_chunk=kv_chunk)
    attn_rows = out.last_layer_attn
    a = len(walk.accepted)
    return VerifyOutcome(
        accepted_tokens=walk.accepted,
        accepted_count=a,
        correction_token=walk.correction,
        bonus_token=walk.bonus,
        target_rows=walk.target_rows,
        last_accepted_attn_row=attn_rows[a - 1].copy() if a >= 1 else None,
        last_committed_attn_row=attn_rows[-1].copy(),
        next_root_dist=next_token_dist(out.logits[-1], temperature),
        levels=walk.levels,
    )


def extract_scores(attn_row: np.ndarray, prefix_len: int) -> np.ndarray:
    """Slice an attention row to the prefix positions and renormalize."""
    if attn_row is None:
        raise StateError("attention scores were not captured")
    if prefix_len < 1 or prefix_len > attn_row.shape[-1]:
        raise ShapeError(f"prefix length {prefix_len} out of range for row "
                         f"of {attn_row.shape[-1]}")
    s = np.asarray(attn_row[:prefix_len], dtype=np.float64)
    total = s.sum()
    if total <= 0:
        # No mass on the prefix: fall back to uniform so selection stays defined.
        return np.full(prefix_len, 1.0 / prefix_len)
    return s / total


# -- hybrid attention (public, head-free) ----------------------------------------

def hybrid_attention(q: np.ndarray,
                     chunks: list[tuple[np.ndarray, np.ndarray]],
                     tree_kv: tuple[np.ndarray, np.ndarray] | None = None,
                     tree_mask: np.ndarray | None = None,
                     scale: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two-phase attention: chunked prefix merged with a masked tree part.

    ``q`` is ``[nq, d]``, each chunk is ``(K [L, d], V [L, d])`` and the
    optional tree part is ``(K_t [nt, d], V_t [nt, d])`` with a boolean
    ``[nq, nt]`` visibility mask. Returns the attention output and the
    merged probability rows over all visible positions, in part order.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ShapeError(f"queries must be [nq, d], got {q.shape}")
    d = q.shape[1]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]] = []
    for k, v in chunks:
        if k.shape[0] < 1:
            raise ShapeError("chunk sizes must be >= 1")
        parts.append((np.asarray(k, dtype=np.float64),
                      np.asarray(v, dtype=np.float64), None))
    if tree_kv is not None:
        kt, vt = tree_kv
        if tree_mask is None:
            raise ShapeError("tree part requires a visibility mask")
        tree_mask = np.asarray(tree_mask, dtype=bool)
        if tree_mask.shape != (q.shape[0], kt.shape[0]):
            raise ShapeError(f"tree mask shape {tree_mask.shape}, expected "
                             f"{(q.shape[0], kt.shape[0])}")
        parts.append((np.asarray(kt, dtype=np.float64),
                      np.asarray(vt, dtype=np.float64), tree_mask))
    if not parts:
        raise ShapeError("hybrid attention requires at least one KV part")
    out, probs = attn.attend(q, parts, scale, want_probs=True)
    return out, probs
