"""Speculative hot-vocab sampling with rejection correctness.

The sampler proposes from a small hot set (the head of a frequency-ranked
vocabulary ordering), accepts with probability equal to the hot set's
probability mass, and otherwise draws from the tail. The accepted path touches
H elements instead of V; the composite law is exactly the full softmax because
the target-to-proposal ratio is constant on the hot set (envelope 1 rejection
sampling).

All functions here operate on SAMPLING-READY logits: penalties applied and
temperature already folded in. Callers that use a temperature other than 1
scale before entering this module, so the weight convention
w = exp(z - row_max) needs no extra knobs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DegenerateRowError, SamplingParams, TokenDecision
from .filtering import (
    DOMAIN_HOT_SET,
    DOMAIN_TAIL_SET,
    build_filter_index_map,
    categorical_draw,
    categorical_draw_batch,
    filtered_draw,
    subset_softmax,
)
from .instrument import VisitCounter


@dataclass
class HotVocab:
    """Ordered hot token-id set with forward/inverse maps to the full vocabulary."""

    vocab_size: int
    hot_ids: np.ndarray  # int64, hottest first
    inverse: np.ndarray = field(default=None)  # type: ignore[assignment]
    _tail_ids: np.ndarray | None = field(default=None, repr=False)
    _tail_inverse: np.ndarray | None = field(default=None, repr=False)
    # engine-side cache of shard gather plans, keyed by (shard width, t)
    plan_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.hot_ids = np.asarray(self.hot_ids, dtype=np.int64)
        if self.hot_ids.size < 1:
            raise ValueError("hot set must contain at least one token")
        if self.hot_ids.size > self.vocab_size:
            raise ValueError("hot set larger than vocabulary")
        if self.inverse is None:
            inv = np.full(self.vocab_size, -1, dtype=np.int64)
            inv[self.hot_ids] = np.arange(self.hot_ids.size, dtype=np.int64)
            self.inverse = inv
        if np.unique(self.hot_ids).size != self.hot_ids.size:
            raise ValueError("hot ids must be distinct")

    @property
    def size(self) -> int:
        return int(self.hot_ids.shape[0])

    @property
    def tail_size(self) -> int:
        return self.vocab_size - self.size

    @property
    def tail_ids(self) -> np.ndarray:
        # complement materialized lazily and cached; ascending token id
        if self._tail_ids is None:
            mask = np.ones(self.vocab_size, dtype=bool)
            mask[self.hot_ids] = False
            self._tail_ids = np.flatnonzero(mask).astype(np.int64)
        return self._tail_ids

    @property
    def tail_inverse(self) -> np.ndarray:
        # full-vocab id -> tail position, -1 for hot members
        if self._tail_inverse is None:
            inv = np.full(self.vocab_size, -1, dtype=np.int64)
            inv[self.tail_ids] = np.arange(self.tail_ids.shape[0], dtype=np.int64)
            self._tail_inverse = inv
        return self._tail_inverse

    def resize(self, hot_size: int) -> "HotVocab":
        """Prefix of the same ordering with a new size."""
        if hot_size < 1 or hot_size > self.size:
            raise ValueError(f"hot size {hot_size} outside [1, {self.size}]")
        return HotVocab(self.vocab_size, self.hot_ids[:hot_size].copy())


def build_hot_vocab(freq_trace, hot_size: int, vocab_size: int) -> HotVocab:
    """Top hot_size token ids by trace count; ties broken toward smaller id."""
    if hot_size < 1 or hot_size > vocab_size:
        raise ValueError(f"hot size {hot_size} outside [1, {vocab_size}]")
    counts = np.zeros(vocab_size, dtype=np.int64)
    seen = set()
    for token_id, count in freq_trace:
        token_id = int(token_id)
        if token_id < 0 or token_id >= vocab_size:
            raise ValueError(f"trace token {token_id} outside [0, {vocab_size})")
        if count < 0:
            raise ValueError("trace counts must be nonnegative")
        if token_id in seen:
            raise ValueError(f"duplicate trace token {token_id}")
        seen.add(token_id)
        counts[token_id] = int(count)
    order = np.lexsort((np.arange(vocab_size), -counts))
    return HotVocab(vocab_size, order[:hot_size])


def load_hot_vocab_trace(path) -> list[tuple[int, int]]:
    """Read a `token_id<TAB>count` trace file (descending count, # comments)."""
    trace: list[tuple[int, int]] = []
    prev = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected token_id<TAB>count")
            token_id, count = int(parts[0]), int(parts[1])
            if prev is not None and count > prev:
                raise ValueError(f"{path}:{lineno}: counts must be descending")
            prev = count
            trace.append((token_id, count))
    return trace


def save_hot_vocab_trace(path, trace) -> None:
    items = sorted(trace, key=lambda tc: (-tc[1], tc[0]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# token_id\tcount\n")
        for token_id, count in items:
            fh.write(f"{token_id}\t{count}\n")


def stable_weights(logits_slice: np.ndarray, row_max: float) -> np.ndarray:
    """w = exp(z - row_max). With row_max the true full-row max, all w in (0, 1]."""
    return np.exp(np.asarray(logits_slice, dtype=np.float64) - row_max)


def hot_mass(hot_sum: float, total_sum: float) -> float:
    """Fraction of probability mass covered by the hot set, clamped to [0, 1]."""
    if not np.isfinite(total_sum) or total_sum <= 0.0:
        raise DegenerateRowError(f"total weight sum {total_sum} is unusable")
    if hot_sum < 0.0:
        raise ValueError("hot weight sum cannot be negative")
    return min(hot_sum / total_sum, 1.0)


def row_summary(ready_row: np.ndarray) -> tuple[float, float]:
    """(row_max, total_expsum) over a full sampling-ready row.

    This is the exact arithmetic the logits producer uses to precompute the
    per-row stats carried on shard frames, so samplers and oracles agree
    bit for bit.
    """
    z = np.asarray(ready_row, dtype=np.float64)
    rm = float(z.max())
    if not np.isfinite(rm):
        raise DegenerateRowError("row max is not finite")
    return rm, float(np.exp(z - rm).sum())


@dataclass
class ShvsRowContext:
    """One sequence's view for a speculative draw.

    logits is either a full sampling-ready row (ndarray) or any object with a
    gather(ids) -> float64 method (the shard-assembled, penalize-on-gather
    accessor used by the engine). row_max and total_expsum come from the
    producer and cover the FULL vocabulary.
    """

    logits: object
    row_max: float
    total_expsum: float

    def gather(self, ids: np.ndarray) -> np.ndarray:
        if isinstance(self.logits, np.ndarray):
            return self.logits[ids].astype(np.float64, copy=False)
        return self.logits.gather(ids)


def _effective_params(params: SamplingParams) -> SamplingParams:
    # temperature already folded into sampling-ready logits
    if params.temperature == 1.0:
        return params
    return dataclasses.replace(params, temperature=1.0)


def split_decision(
    hot_values: np.ndarray,
    tail_values_fn: Callable[[], object],
    hot: HotVocab,
    params: SamplingParams,
    row_max: float,
    total_expsum: float,
    draws,
    counter: VisitCounter | None = None,
) -> tuple[int, bool, float, float]:
    """Shared hot/tail draw: returns (token_id, accepted_hot, logprob, alpha).

    Every sampling variant funnels through this routine so that, given the same
    uniforms, they emit bit-identical tokens; variants differ only in how they
    produced hot_values / tail_values.

    tail_values_fn may return the full tail slice, or a (values, positions)
    pair holding a provably sufficient candidate subset and its tail-local
    positions (ascending); the draw is identical either way.

    draws = (u_hot, u_accept, u_tail), consumed in that fixed order; draws that
    the control flow skips are discarded, never reused.
    """
    if counter is not None:
        counter.add(hot.size)
    w_hot = stable_weights(hot_values, row_max)
    hot_sum = float(w_hot.sum())
    params_eff = _effective_params(params)

    if hot.tail_size == 0:
        alpha = 1.0
    else:
        alpha = hot_mass(hot_sum, total_expsum)

    if hot_sum > 0.0:
        fmap, q, local = filtered_draw(hot_values, params_eff, float(draws[0]), DOMAIN_HOT_SET)
        if float(draws[1]) <= alpha:
            token = int(hot.hot_ids[fmap.forward[local]])
            return token, True, float(np.log(q[local])), alpha
    elif hot.tail_size == 0:
        raise DegenerateRowError("hot set covers the vocabulary but has zero mass")

    # rejected (or hot mass underflowed to zero): one pass over the tail
    if counter is not None:
        counter.add(hot.tail_size)
    tail_result = tail_values_fn()
    if isinstance(tail_result, tuple):
        tail_values, positions = tail_result
    else:
        tail_values, positions = tail_result, None
    fmap_t, r, local_t = filtered_draw(tail_values, params_eff, float(draws[2]), DOMAIN_TAIL_SET)
    if not np.isfinite(tail_values[fmap_t.forward[0]]):
        raise DegenerateRowError("tail has no finite candidate")
    pos = int(fmap_t.forward[local_t])
    if positions is not None:
        pos = int(positions[pos])
    token = int(hot.tail_ids[pos])
    return token, False, float(np.log(r[local_t])), alpha


def shvs_sample(
    ctx: ShvsRowContext,
    hot: HotVocab,
    params: SamplingParams,
    draws,
    iteration_id: int = 0,
    seq_id: int = 0,
    eos_ids=frozenset(),
    counter: VisitCounter | None = None,
) -> TokenDecision:
    """Fast path: gather only the hot slice; touch the tail only on rejection."""
    hot_values = ctx.gather(hot.hot_ids)
    token, accepted, logprob, _ = split_decision(
        hot_values,
        lambda: ctx.gather(hot.tail_ids),
        hot,
        params,
        ctx.row_max,
        ctx.total_expsum,
        draws,
        counter,
    )
    if counter is not None:
        counter.count_token()
    return TokenDecision(
        iteration_id=iteration_id,
        seq_id=seq_id,
        token_id=token,
        is_eos=token in eos_ids,
        accepted_hot=accepted,
        logprob=logprob,
    )


def shvs_sample_batch(
    ready_row: np.ndarray,
    hot: HotVocab,
    params: SamplingParams,
    draws: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draws from one row: tokens plus accepted flags, law-identical
    to per-draw shvs_sample with the same uniforms (validation workloads)."""
    z = np.asarray(ready_row, dtype=np.float64)
    row_max, total = row_summary(z)
    params_eff = _effective_params(params)
    draws = np.asarray(draws, dtype=np.float64)

    hot_values = z[hot.hot_ids]
    w_hot = stable_weights(hot_values, row_max)
    hot_sum = float(w_hot.sum())
    alpha = 1.0 if hot.tail_size == 0 else hot_mass(hot_sum, total)

    n = draws.shape[0]
    tokens = np.empty(n, dtype=np.int64)
    if hot_sum > 0.0:
        fmap, truncated = build_filter_index_map(hot_values, params_eff, DOMAIN_HOT_SET)
        q = subset_softmax(truncated, 1.0)
        hot_locals = categorical_draw_batch(q, draws[:, 0])
        hot_tokens = hot.hot_ids[fmap.forward[hot_locals]]
        accepted = draws[:, 1] <= alpha
    else:
        hot_tokens = np.zeros(n, dtype=np.int64)
        accepted = np.zeros(n, dtype=bool)

    tokens[accepted] = hot_tokens[accepted]
    n_rej = int((~accepted).sum())
    if n_rej:
        tail_values = z[hot.tail_ids]
        fmap_t, truncated_t = build_filter_index_map(tail_values, params_eff, DOMAIN_TAIL_SET)
        r = subset_softmax(truncated_t, 1.0)
        tail_locals = categorical_draw_batch(r, draws[~accepted, 2])
        tokens[~accepted] = hot.tail_ids[fmap_t.forward[tail_locals]]
    return tokens, accepted


def analytic_shvs_distribution(
    ready_row: np.ndarray, hot: HotVocab, params: SamplingParams
) -> np.ndarray:
    """Exact output law of the speculative sampler as a full-vocab vector.

    Mirrors split_decision term by term: alpha times the (filtered) hot
    proposal on the hot support, plus one minus alpha times the (filtered)
    tail proposal on the tail support. Intended as a small-V oracle.
    """
    z = np.asarray(ready_row, dtype=np.float64)
    row_max, total = row_summary(z)
    params_eff = _effective_params(params)

    hot_values = z[hot.hot_ids]
    w_hot = stable_weights(hot_values, row_max)
    hot_sum = float(w_hot.sum())
    alpha = 1.0 if hot.tail_size == 0 else hot_mass(hot_sum, total)

    dist = np.zeros(z.shape[0], dtype=np.float64)
    if hot_sum > 0.0:
        fmap, truncated = build_filter_index_map(hot_values, params_eff, DOMAIN_HOT_SET)
        q = subset_softmax(truncated, 1.0)
        dist[hot.hot_ids[fmap.forward]] = alpha * q
    if hot.tail_size > 0 and alpha < 1.0:
        tail_values = z[hot.tail_ids]
        fmap_t, truncated_t = build_filter_index_map(tail_values, params_eff, DOMAIN_TAIL_SET)
        r = subset_softmax(truncated_t, 1.0)
        dist[hot.tail_ids[fmap_t.forward]] = (1.0 - alpha) * r
    return dist


def acceptance_rate(decisions) -> float:
    """Fraction of decisions that took the hot path."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("empty decision window")
    return sum(1 for d in decisions if d.accepted_hot) / len(decisions)
