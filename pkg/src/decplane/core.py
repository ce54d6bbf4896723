"""Domain types and per-sequence state shared across the decision plane."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# top_k sentinel: 0 means "disabled" (treat as full vocabulary)
TOP_K_DISABLED = 0

DEFAULT_MAX_GENERATED = 1 << 16


class RangeError(ValueError):
    """Token id outside [0, V)."""


class DegenerateRowError(ValueError):
    """A logits row with no usable probability mass (all weights zero)."""


@dataclass
class SamplingParams:
    """Per-sequence decoding knobs. Defaults are the neutral configuration."""

    temperature: float = 1.0
    top_k: int = TOP_K_DISABLED
    top_p: float = 1.0
    min_p: float = 0.0
    rep_penalty: float = 1.0
    presence_penalty: float = 0.0
    frequency_penalty: float = 0.0
    seed: int = 0

    def penalties_neutral(self) -> bool:
        return (
            self.rep_penalty == 1.0
            and self.presence_penalty == 0.0
            and self.frequency_penalty == 0.0
        )

    def filters_neutral(self, vocab_size: int) -> bool:
        k_off = self.top_k == TOP_K_DISABLED or self.top_k >= vocab_size
        return k_off and self.top_p >= 1.0 and self.min_p == 0.0

    def without_truncation(self) -> "SamplingParams":
        return SamplingParams(
            temperature=self.temperature,
            top_k=TOP_K_DISABLED,
            top_p=1.0,
            min_p=0.0,
            rep_penalty=self.rep_penalty,
            presence_penalty=self.presence_penalty,
            frequency_penalty=self.frequency_penalty,
            seed=self.seed,
        )


def validate_params(p: SamplingParams, vocab_size: int) -> list[str]:
    """Return every violated constraint (empty list means valid). Never raises."""
    errors = []
    if not p.temperature > 0:
        errors.append("temperature must be positive")
    if p.top_k != TOP_K_DISABLED:
        if p.top_k < 1:
            errors.append("top_k must be >= 1 when enabled")
        elif p.top_k > vocab_size:
            errors.append("top_k exceeds vocabulary")
    if not (0 < p.top_p <= 1):
        errors.append("top_p must be in (0, 1]")
    if not (0 <= p.min_p < 1):
        errors.append("min_p must be in [0, 1)")
    if not p.rep_penalty > 0:
        errors.append("rep_penalty must be positive")
    if p.seed < 0 or p.seed >= 1 << 64:
        errors.append("seed must fit in 64 unsigned bits")
    return errors


class _AppendBuffer:
    """Preallocated int32 append-only buffer exposing a zero-copy view."""

    __slots__ = ("data", "count")

    def __init__(self, capacity: int):
        self.data = np.empty(capacity, dtype=np.int32)
        self.count = 0

    def append(self, value: int) -> None:
        if self.count >= self.data.shape[0]:
            raise OverflowError("append buffer full")
        self.data[self.count] = value
        self.count += 1

    def view(self) -> np.ndarray:
        return self.data[: self.count]


@dataclass
class SequenceState:
    """Token history of one sequence: histograms, presence masks, append cursor.

    Owned by exactly one sampler worker per iteration; never mutated
    concurrently. prompt_hist is immutable after construction.
    """

    seq_id: int
    vocab_size: int
    prompt_hist: np.ndarray
    output_hist: np.ndarray
    prompt_mask: np.ndarray
    output_mask: np.ndarray
    generated_len: int = 0
    tokens: _AppendBuffer = field(default=None)  # type: ignore[assignment]
    # unique ids with nonzero output count, in first-seen order
    output_ids: _AppendBuffer = field(default=None)  # type: ignore[assignment]
    # unique ids present in prompt or output (repetition-penalty support)
    touched_ids: _AppendBuffer = field(default=None)  # type: ignore[assignment]

    @property
    def row_append_cursor(self) -> int:
        return self.tokens.count

    def history(self) -> np.ndarray:
        """Generated tokens so far, oldest first."""
        return self.tokens.view()

    def output_id_view(self) -> np.ndarray:
        return self.output_ids.view()

    def touched_id_view(self) -> np.ndarray:
        return self.touched_ids.view()

    def check_consistency(self) -> None:
        """Fully recompute the histogram/mask invariants (test support)."""
        assert np.array_equal(self.prompt_mask, self.prompt_hist > 0)
        assert np.array_equal(self.output_mask, self.output_hist > 0)
        assert int(self.output_hist.sum()) == self.generated_len
        rebuilt = np.bincount(self.history(), minlength=self.vocab_size).astype(np.int32)
        assert np.array_equal(rebuilt, self.output_hist)


def new_sequence_state(
    seq_id: int,
    prompt_tokens,
    vocab_size: int,
    max_generated: int = DEFAULT_MAX_GENERATED,
) -> SequenceState:
    """Build fresh state: prompt histogram counted once, output side empty."""
    prompt = np.asarray(list(prompt_tokens), dtype=np.int64)
    if prompt.size and (prompt.min() < 0 or prompt.max() >= vocab_size):
        raise RangeError(f"prompt token outside [0, {vocab_size})")
    prompt_hist = np.bincount(prompt, minlength=vocab_size).astype(np.int32)
    state = SequenceState(
        seq_id=seq_id,
        vocab_size=vocab_size,
        prompt_hist=prompt_hist,
        output_hist=np.zeros(vocab_size, dtype=np.int32),
        prompt_mask=prompt_hist > 0,
        output_mask=np.zeros(vocab_size, dtype=bool),
    )
    state.tokens = _AppendBuffer(max_generated)
    state.output_ids = _AppendBuffer(min(max_generated, vocab_size))
    prompt_unique = np.flatnonzero(state.prompt_mask)
    state.touched_ids = _AppendBuffer(min(prompt_unique.size + max_generated, vocab_size))
    for tok in prompt_unique:
        state.touched_ids.append(int(tok))
    return state


@dataclass
class TokenDecision:
    """One sampled token. token_id always indexes the full vocabulary."""

    iteration_id: int
    seq_id: int
    token_id: int
    is_eos: bool = False
    accepted_hot: bool = False
    logprob: float | None = None


@dataclass
class LogitsShardBlock:
    """Rank-local vocabulary-major logits slice plus full-row summary stats.

    values has shape (v_hi - v_lo, B) with the vocabulary axis contiguous per
    sequence column (Fortran order). row_max and total_expsum are computed by
    the producer over the FULL vocabulary on the sampling-ready scale
    (penalized, temperature-scaled), so every shard of an iteration carries
    identical copies.
    """

    iteration_id: int
    rank: int
    v_lo: int
    v_hi: int
    values: np.ndarray  # float32, shape (v_hi - v_lo, B), F-order
    row_max: np.ndarray  # float64, shape (B,)
    total_expsum: np.ndarray  # float64, shape (B,)
    tp_degree: int = 0

    @property
    def batch_size(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        rows = self.v_hi - self.v_lo
        if self.values.shape != (rows, self.batch_size):
            raise ValueError("shard values shape does not match shard_range")
        if self.row_max.shape != (self.batch_size,) or self.total_expsum.shape != (self.batch_size,):
            raise ValueError("row summary vectors must have one entry per sequence")


def shard_ranges(vocab_size: int, tp_degree: int) -> list[tuple[int, int]]:
    """Disjoint [v_lo, v_hi) tiles covering [0, V). Requires V % t == 0."""
    if vocab_size % tp_degree != 0:
        raise ValueError(f"vocab size {vocab_size} not divisible by tp degree {tp_degree}")
    width = vocab_size // tp_degree
    return [(r * width, (r + 1) * width) for r in range(tp_degree)]
