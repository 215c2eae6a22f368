"""Chunked attention with online-softmax merging.

The prefix KV can be split into arbitrary contiguous parts; each part
yields a running max, a running denominator and a partial numerator, and
the parts combine into the exact softmax-weighted output. A boolean mask
(True = visible) may restrict any part; masked positions get exactly zero
weight.

Shapes are head-generic: queries ``[..., nq, dh]`` against parts
``[..., L, dh]`` with leading batch/head axes broadcast by numpy matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalError, ShapeError


@dataclass
class PartStats:
    """Per-part online-softmax state for a block of key/value rows."""

    m: np.ndarray  # [..., nq] running max of scores
    weights: np.ndarray  # [..., nq, L] exp(score - m)
    denom: np.ndarray  # [..., nq] sum of weights
    acc: np.ndarray  # [..., nq, dh] weights @ values


def part_stats(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float,
               mask: np.ndarray | None = None) -> PartStats:
    """Score one KV part against the queries."""
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        if mask.shape != scores.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} does not match scores {scores.shape[-2:]}")
        scores = np.where(mask, scores, -np.inf)
    m = np.max(scores, axis=-1)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    weights = np.exp(scores - m_safe[..., None])
    denom = np.sum(weights, axis=-1)
    acc = weights @ v
    return PartStats(m=m, weights=weights, denom=denom, acc=acc)


def merge_parts(parts: list[PartStats], want_probs: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Combine per-part stats into the final output and optional probabilities.

    Returns ``(out [..., nq, dh], probs [..., nq, sum(L)] or None)``. The
    probabilities are normalized over the union of all visible positions, in
    part order.
    """
    if not parts:
        raise ShapeError("attention requires at least one KV part")
    m_star = parts[0].m
    for p in parts[1:]:
        m_star = np.maximum(m_star, p.m)
    if not np.all(np.isfinite(m_star)):
        raise InternalError("attention row with no visible positions")
    denom = np.zeros_like(m_star)
    acc = np.zeros_like(parts[0].acc)
    scales = []
    for p in parts:
        s = np.exp(np.where(np.isfinite(p.m), p.m, -np.inf) - m_star)
        scales.append(s)
        denom = denom + s * p.denom
        acc = acc + s[..., None] * p.acc
    if np.any(denom <= 0):
        raise InternalError("attention denominator is zero")
    out = acc / denom[..., None]
    probs = None
    if want_probs:
        probs = np.concatenate(
            [p.weights * (s / denom)[..., None] for p, s in zip(parts, scales)], axis=-1
        )
    return out, probs


def attend(q: np.ndarray,
           parts: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]],
           scale: float,
           want_probs: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Attention over a list of ``(k, v, mask)`` parts via online merging."""
    stats = [part_stats(q, k, v, scale, mask) for k, v, mask in parts]
    return merge_parts(stats, want_probs)


def attend_monolithic(q: np.ndarray,
                      parts: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]],
                      scale: float,
                      want_probs: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Single-softmax attention over the concatenated parts.

    Mathematically identical to :func:`attend`; kept as the reference path.
    """
    if not parts:
        raise ShapeError("attention requires at least one KV part")
    ks = np.concatenate([k for k, _, _ in parts], axis=-2)
    vs = np.concatenate([v for _, v, _ in parts], axis=-2)
    scores = (q @ np.swapaxes(ks, -1, -2)) * scale
    col = 0
    for k, _, mask in parts:
        width = k.shape[-2]
        if mask is not None:
            block = scores[..., col:col + width]
            scores[..., col:col + width] = np.where(mask, block, -np.inf)
        col += width
    m = np.max(scores, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise InternalError("attention row with no visible positions")
    w = np.exp(scores - m)
    denom = np.sum(w, axis=-1, keepdims=True)
    probs = w / denom
    out = probs @ vs
    return out, (probs if want_probs else None)


def split_chunks(length: int, chunk: int) -> list[tuple[int, int]]:
    """Contiguous ``[start, end)`` spans covering ``length`` in ``chunk`` steps."""
    if chunk < 1:
        raise ShapeError(f"chunk size must be >= 1, got {chunk}")
    return [(s, min(s + chunk, length)) for s in range(0, length, chunk)]
