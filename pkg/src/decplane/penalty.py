"""Column-wise penalties with incremental history updates.

The repetition factor divides logits for every token present in the prompt or
the output so far: z / (1 + (rep - 1) * present). Presence and frequency
penalties subtract from logits additively. Incremental updates touch only the
ids that actually occur, so per-step cost tracks history size, not vocabulary
size. Note the division form makes negative logits LARGER (less penalized)
when rep > 1; that behavior is intentional and asserted in tests.
"""

from __future__ import annotations

import numpy as np

from .core import RangeError, SamplingParams, SequenceState


def update_output_histogram(state: SequenceState, new_token: int) -> SequenceState:
    """Record one generated token. Touches only index new_token."""
    tok = int(new_token)
    if tok < 0 or tok >= state.vocab_size:
        raise RangeError(f"token {tok} outside [0, {state.vocab_size})")
    was_present = bool(state.output_mask[tok])
    state.output_hist[tok] += 1
    state.output_mask[tok] = True
    state.generated_len += 1
    state.tokens.append(tok)
    if not was_present:
        state.output_ids.append(tok)
        if not state.prompt_mask[tok]:
            state.touched_ids.append(tok)
    return state


def apply_repetition_penalty(logits_col: np.ndarray, state: SequenceState, rep_penalty: float) -> np.ndarray:
    """Divide logits by the repetition factor at ids present in history."""
    if rep_penalty <= 0:
        raise ValueError("rep_penalty must be positive")
    out = np.array(logits_col, dtype=np.float64, copy=True)
    if rep_penalty == 1.0:
        return out
    ids = state.touched_id_view()
    out[ids] = out[ids] / rep_penalty
    return out


def apply_presence_frequency(
    logits_col: np.ndarray, state: SequenceState, presence_penalty: float, frequency_penalty: float
) -> np.ndarray:
    """Subtract presence/frequency terms at ids with nonzero output count."""
    out = np.array(logits_col, dtype=np.float64, copy=True)
    if presence_penalty == 0.0 and frequency_penalty == 0.0:
        return out
    ids = state.output_id_view()
    if ids.size == 0:
        return out
    # two sequential subtractions; keep the op order identical everywhere so
    # sparse and full-vector paths agree bit for bit
    vals = out[ids]
    vals = vals - presence_penalty
    vals = vals - frequency_penalty * state.output_hist[ids].astype(np.float64)
    out[ids] = vals
    return out


def apply_penalties(logits_col: np.ndarray, state: SequenceState, params: SamplingParams) -> np.ndarray:
    """Repetition first, then presence/frequency. Identity for neutral params."""
    if params.penalties_neutral():
        return np.array(logits_col, dtype=np.float64, copy=True)
    out = apply_repetition_penalty(logits_col, state, params.rep_penalty)
    if params.presence_penalty != 0.0 or params.frequency_penalty != 0.0:
        ids = state.output_id_view()
        if ids.size:
            vals = out[ids]
            vals = vals - params.presence_penalty
            vals = vals - params.frequency_penalty * state.output_hist[ids].astype(np.float64)
            out[ids] = vals
    return out


def apply_penalties_at(
    values: np.ndarray, ids: np.ndarray, state: SequenceState, params: SamplingParams
) -> np.ndarray:
    """Penalize a gathered slice values = logits[ids] without touching the rest.

    Elementwise-identical to apply_penalties(full)[ids]; this is what keeps the
    hot-path O(H) while matching the full-pass variants bit for bit.
    """
    out = np.array(values, dtype=np.float64, copy=True)
    if params.penalties_neutral():
        return out
    if params.rep_penalty != 1.0:
        present = state.prompt_mask[ids] | state.output_mask[ids]
        out[present] = out[present] / params.rep_penalty
    if params.presence_penalty != 0.0 or params.frequency_penalty != 0.0:
        in_output = state.output_mask[ids]
        if np.any(in_output):
            vals = out[in_output]
            vals = vals - params.presence_penalty
            vals = vals - params.frequency_penalty * state.output_hist[ids[in_output]].astype(np.float64)
            out[in_output] = vals
    return out


def apply_penalties_indexed(
    values: np.ndarray,
    position_of: np.ndarray,
    id_of_position: np.ndarray,
    state: SequenceState,
    params: SamplingParams,
) -> np.ndarray:
    """Penalize a gathered slice by walking the history instead of the slice.

    position_of maps full-vocab id -> position in values (or -1 when the id is
    outside the slice); id_of_position is the inverse. Elementwise identical
    to apply_penalties_at, but costs O(|history|) rather than O(len(values)),
    which keeps the speculative hot path linear in the hot size only.
    """
    out = np.array(values, dtype=np.float64, copy=True)
    if params.penalties_neutral():
        return out
    if params.rep_penalty != 1.0:
        pos = position_of[state.touched_id_view()]
        pos = pos[pos >= 0]
        out[pos] = out[pos] / params.rep_penalty
    if params.presence_penalty != 0.0 or params.frequency_penalty != 0.0:
        pos = position_of[state.output_id_view()]
        pos = pos[pos >= 0]
        if pos.shape[0]:
            vals = out[pos]
            vals = vals - params.presence_penalty
            vals = vals - params.frequency_penalty * state.output_hist[id_of_position[pos]].astype(np.float64)
            out[pos] = vals
    return out


def rebuild_histograms(history: np.ndarray, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Full histogram rebuild from scratch (the deliberately naive path)."""
    hist = np.bincount(np.asarray(history, dtype=np.int64), minlength=vocab_size).astype(np.int32)
    return hist, hist > 0


def apply_penalties_full_rebuild(
    logits_col: np.ndarray, state: SequenceState, params: SamplingParams
) -> np.ndarray:
    """Naive whole-vocabulary penalty pass rebuilding counts every call.

    Used by the baseline ablation variant. Materializes the repetition factor
    over all V and applies dense vector ops; the arithmetic per element is the
    same as the incremental path.
    """
    out = np.array(logits_col, dtype=np.float64, copy=True)
    v = state.vocab_size
    out_hist, out_mask = rebuild_histograms(state.history(), v)
    if params.rep_penalty != 1.0:
        present = state.prompt_mask | out_mask
        factor = np.ones(v, dtype=np.float64)
        factor[present] = params.rep_penalty
        out = out / factor
    if params.presence_penalty != 0.0 or params.frequency_penalty != 0.0:
        out = out - params.presence_penalty * out_mask.astype(np.float64)
        out = out - params.frequency_penalty * out_hist.astype(np.float64)
    return out
