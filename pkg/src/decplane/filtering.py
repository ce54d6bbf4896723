"""Truncation-first candidate filtering and the exact-semantics sampling path.

Filtering narrows the candidate set BEFORE normalization, so softmax and the
categorical draw cost O(|K|) instead of O(V). The index map keeps enough
information to map a subset draw back to the source domain. Stage order is
top-k, then top-p, then min-p, all measured on temperature-scaled logits;
candidates are emitted in descending-probability order (ties by smaller id)
so the nucleus prefix and the draw CDF share one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TOP_K_DISABLED, SamplingParams, SequenceState, TokenDecision
from .instrument import VisitCounter
from .penalty import apply_penalties

DOMAIN_FULL_VOCAB = "full-vocab"
DOMAIN_HOT_SET = "hot-set"
DOMAIN_TAIL_SET = "tail-set"


@dataclass
class FilterIndexMap:
    """Injective map from subset index to source-domain id, probability-descending."""

    forward: np.ndarray  # int64, subset index -> source-domain id
    source_domain: str = DOMAIN_FULL_VOCAB

    @property
    def subset_size(self) -> int:
        return int(self.forward.shape[0])


def _top_k_ids(logits: np.ndarray, k: int) -> np.ndarray:
    """Partial selection of the k largest, tie rule (value desc, id asc).

    Single argpartition pass in the common case; when the boundary value also
    appears among the excluded elements the tie is repaired exactly (boundary
    ties go to the smallest ids).
    """
    n = logits.shape[0]
    if k >= n:
        return np.arange(n, dtype=np.int64)
    split = np.argpartition(logits, n - k)
    selected = split[n - k :]
    boundary = logits[split[n - k]]
    # the selected SET is canonical unless the boundary value also occurs on
    # the excluded side, in which case ties must go to the smallest ids
    if int((logits == boundary).sum()) == int((logits[selected] == boundary).sum()):
        return np.asarray(selected, dtype=np.int64)
    greater = np.flatnonzero(logits > boundary)
    need = k - greater.shape[0]
    ties = np.flatnonzero(logits == boundary)[:need]
    return np.concatenate([greater, ties]).astype(np.int64)


def _filter_core(
    logits: np.ndarray,
    params: SamplingParams,
    source_domain: str,
    counter: VisitCounter | None,
) -> tuple[FilterIndexMap, np.ndarray, np.ndarray | None]:
    """Shared filter body; also returns the kept stable weights when they were
    computed on the unscaled (temperature-1) domain, so callers can normalize
    without re-exponentiating."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    if n < 1:
        raise ValueError("empty source domain")
    if counter is not None:
        counter.add(n)

    if params.top_k != TOP_K_DISABLED and params.top_k < n:
        ids = _top_k_ids(z, max(1, params.top_k))
    else:
        ids = np.arange(n, dtype=np.int64)

    # canonical order: descending by logit, equal values by ascending id
    order = np.lexsort((ids, -z[ids]))
    ids = ids[order]
    kept = ids.shape[0]

    w_kept = None
    if params.top_p < 1.0 or params.min_p > 0.0:
        scaled = z[ids] / params.temperature
        w = np.exp(scaled - scaled[0])  # scaled[0] is the max, so w[0] == 1
        if params.top_p < 1.0:
            cum = np.cumsum(w)
            threshold = params.top_p * cum[-1]
            # smallest prefix whose mass reaches the threshold, inclusive
            kept = min(kept, int(np.searchsorted(cum, threshold, side="left")) + 1)
        if params.min_p > 0.0:
            floor = params.min_p * w[0]
            kept = min(kept, int(np.searchsorted(-w, -floor, side="right")))
        kept = max(1, kept)
        ids = ids[:kept]
        if params.temperature == 1.0:
            w_kept = w[:kept]

    fmap = FilterIndexMap(forward=ids, source_domain=source_domain)
    return fmap, z[ids], w_kept


def build_filter_index_map(
    logits: np.ndarray,
    params: SamplingParams,
    source_domain: str = DOMAIN_FULL_VOCAB,
    counter: VisitCounter | None = None,
) -> tuple[FilterIndexMap, np.ndarray]:
    """Filter a logits vector, returning the index map and the truncated logits.

    truncated[i] = logits[forward[i]]; the result is never empty (the argmax
    survives every stage) and degenerate parameter combinations clamp rather
    than raise.
    """
    fmap, truncated, _ = _filter_core(logits, params, source_domain, counter)
    return fmap, truncated


def filtered_draw(
    logits: np.ndarray,
    params: SamplingParams,
    u: float,
    source_domain: str = DOMAIN_FULL_VOCAB,
    counter: VisitCounter | None = None,
) -> tuple[FilterIndexMap, np.ndarray, int]:
    """Filter, normalize, and draw in one pass for temperature-1 params.

    Bit-identical to build_filter_index_map followed by subset_softmax(.., 1)
    and categorical_draw; reuses the filter's stable weights when available.
    """
    fmap, truncated, w = _filter_core(logits, params, source_domain, counter)
    if w is None or params.temperature != 1.0:
        w = np.exp((truncated - truncated[0]) / params.temperature)
    probs = w / w.sum()
    return fmap, probs, categorical_draw(probs, u)


def subset_softmax(truncated_logits: np.ndarray, temperature: float) -> np.ndarray:
    """Stable softmax over the truncated candidates.

    Equals the masked softmax over the source domain restricted to the subset,
    because the shared normalizer cancels.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(truncated_logits, dtype=np.float64)
    if z.shape[0] < 1:
        raise ValueError("empty candidate set")
    w = np.exp((z - z.max()) / temperature)
    return w / w.sum()


def categorical_draw(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: smallest index whose cumulative mass exceeds u."""
    cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, cdf.shape[0] - 1)


def categorical_draw_batch(probs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF draws; elementwise identical to categorical_draw."""
    cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
    idx = np.searchsorted(cdf, np.asarray(us, dtype=np.float64), side="right")
    return np.minimum(idx, cdf.shape[0] - 1)


def sample_full(
    logits_row: np.ndarray,
    state: SequenceState,
    params: SamplingParams,
    draws,
    iteration_id: int = 0,
    eos_ids=frozenset(),
    counter: VisitCounter | None = None,
) -> TokenDecision:
    """Reference path: penalties, full-vocabulary filter, subset softmax, draw.

    Consumes the first uniform of `draws`. Emitted logprob is the post-filter
    probability of the chosen candidate, before remapping.
    """
    penalized = apply_penalties(logits_row, state, params)
    fmap, truncated = build_filter_index_map(penalized, params, DOMAIN_FULL_VOCAB, counter)
    probs = subset_softmax(truncated, params.temperature)
    u = draws[0] if np.ndim(draws) else float(draws)
    local = categorical_draw(probs, float(u))
    token = int(fmap.forward[local])
    if counter is not None:
        counter.count_token()
    return TokenDecision(
        iteration_id=iteration_id,
        seq_id=state.seq_id,
        token_id=token,
        is_eos=token in eos_ids,
        accepted_hot=False,
        logprob=float(np.log(probs[local])),
    )
