"""Engine orchestration: scheduler loop, synthetic logits producer, sampler
worker pool, ablation variants, and the runtime control channel.

Per iteration: the scheduler fans a scheduling output to the producer and the
m sampler workers; the producer writes t vocabulary-major shard frames (with
per-row max and exp-sum precomputed on the sampling-ready scale); each worker
assembles a zero-copy view of its column partition, samples one token per
owned sequence, updates the sequence histories, and commits a decision batch;
the scheduler collects exactly one decision per active sequence.

Every uniform variate is keyed by (seed, iteration, seq_id), so emitted tokens
are invariant to the worker count m and the shard count t.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .core import (
    DEFAULT_MAX_GENERATED,
    TOP_K_DISABLED,
    LogitsShardBlock,
    SamplingParams,
    SequenceState,
    TokenDecision,
    new_sequence_state,
    shard_ranges,
    validate_params,
)
from .filtering import DOMAIN_FULL_VOCAB, categorical_draw, filtered_draw
from .instrument import VisitCounter
from .penalty import (
    apply_penalties,
    apply_penalties_at,
    apply_penalties_full_rebuild,
    apply_penalties_indexed,
    update_output_histogram,
)
from .shvs import HotVocab, build_hot_vocab, load_hot_vocab_trace, row_summary, split_decision
from .transport import (
    DecisionBatch,
    DecisionLedger,
    FrameReader,
    GatherPlan,
    LogitsShardFrame,
    RingBuffer,
    SchedulingOutput,
    SeqDescriptor,
    TransportError,
    assemble_view,
    commit_decisions,
    encode_frame,
    partition_batch,
    write_logits_shard,
)

VARIANT_BASELINE_FULL = "baseline-full"
VARIANT_PARALLEL_FULL = "parallel-full"
VARIANT_OFFLOAD_TRUNCATE = "offload-truncate"
VARIANT_SHVS = "shvs"
VARIANTS = (VARIANT_BASELINE_FULL, VARIANT_PARALLEL_FULL, VARIANT_OFFLOAD_TRUNCATE, VARIANT_SHVS)

SOURCE_SYNTHETIC = "synthetic"
SOURCE_TRACE = "trace"
SOURCE_EXTERNAL = "external"

CONFIG_ENV_VAR = "SIMPLE_CONFIG"


class EngineError(RuntimeError):
    pass


class EndOfTraceError(EngineError):
    """Recorded trace ran out of iterations (clean end of stream)."""


class ControlError(ValueError):
    pass


@dataclass
class EngineConfig:
    vocab_size: int = 1024
    tp_degree: int = 1
    pipeline_depth: int = 1
    batch_size: int = 4
    samplers: int = 1
    threads_per_sampler: int = 1  # accepted for parity with deployment configs
    seed: int = 0
    variant: str = VARIANT_SHVS
    logits_source: str = SOURCE_SYNTHETIC
    zipf_exponent: float = 1.2
    noise_scale: float = 0.3
    trace_path: str = ""
    hot_path: str = ""
    hot_size: int = 0  # <= 0 means the full vocabulary
    exactness_mode: bool = False
    eos_ignore: bool = True
    eos_token_ids: tuple = ()
    max_tokens: int = DEFAULT_MAX_GENERATED
    ring_capacity: int = 8
    host: str = "127.0.0.1"
    port: int = 0
    # sampling params (params_ref 0)
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    min_p: float = 0.0
    rep_penalty: float = 1.0
    presence_penalty: float = 0.0
    frequency_penalty: float = 0.0

    def sampling_params(self) -> SamplingParams:
        p = SamplingParams(
            temperature=self.temperature,
            top_k=self.top_k,
            top_p=self.top_p,
            min_p=self.min_p,
            rep_penalty=self.rep_penalty,
            presence_penalty=self.presence_penalty,
            frequency_penalty=self.frequency_penalty,
            seed=self.seed,
        )
        if self.exactness_mode:
            p = p.without_truncation()
        return p

    def validate(self) -> None:
        if self.vocab_size % self.tp_degree != 0:
            raise ValueError(
                f"vocab_size {self.vocab_size} must be divisible by tp_degree {self.tp_degree}"
            )
        if self.samplers < 1:
            raise ValueError("need at least one sampler")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.logits_source not in (SOURCE_SYNTHETIC, SOURCE_TRACE, SOURCE_EXTERNAL):
            raise ValueError(f"unknown logits source {self.logits_source!r}")
        errs = validate_params(self.sampling_params(), self.vocab_size)
        if errs:
            raise ValueError("; ".join(errs))
        if self.hot_size > self.vocab_size:
            raise ValueError("hot_size exceeds vocabulary")


_BOOL_FIELDS = {"exactness_mode", "eos_ignore"}
_INT_FIELDS = {
    "vocab_size", "tp_degree", "pipeline_depth", "batch_size", "samplers",
    "threads_per_sampler", "seed", "hot_size", "max_tokens", "ring_capacity",
    "port", "top_k",
}
_FLOAT_FIELDS = {
    "zipf_exponent", "noise_scale", "temperature", "top_p", "min_p",
    "rep_penalty", "presence_penalty", "frequency_penalty",
}
_STR_FIELDS = {"variant", "logits_source", "trace_path", "hot_path", "host"}


def parse_config_text(text: str, base: EngineConfig | None = None) -> EngineConfig:
    """Parse `key = value` lines over a base config; # starts a comment."""
    cfg = base if base is not None else EngineConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return apply_config_overrides(cfg, values)


def apply_config_overrides(cfg: EngineConfig, values: dict) -> EngineConfig:
    updates = {}
    for key, val in values.items():
        if key in _BOOL_FIELDS:
            updates[key] = str(val).strip().lower() in ("1", "true", "yes", "on")
        elif key in _INT_FIELDS:
            updates[key] = int(val)
        elif key in _FLOAT_FIELDS:
            updates[key] = float(val)
        elif key in _STR_FIELDS:
            updates[key] = str(val)
        elif key == "eos_token_ids":
            toks = str(val).strip()
            updates[key] = tuple(int(x) for x in toks.split(",") if x.strip()) if toks else ()
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(cfg, **updates)


def load_config(path: str | None = None, overrides: dict | None = None) -> EngineConfig:
    """File (explicit or $SIMPLE_CONFIG), then override map, then validation."""
    cfg = EngineConfig()
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    if overrides:
        cfg = apply_config_overrides(cfg, overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# penalize-on-gather accessor shared by samplers and the producer


class ReadyColumn:
    """Sampling-ready access to one logits column: penalized, then divided by
    the temperature. gather() touches only the requested ids."""

    def __init__(self, view, col: int, state: SequenceState, params: SamplingParams):
        self._view = view
        self._col = col
        self._state = state
        self._params = params

    def gather(self, ids: np.ndarray) -> np.ndarray:
        raw = self._view.gather(ids, self._col)
        ready = apply_penalties_at(raw, ids, self._state, self._params)
        if self._params.temperature != 1.0:
            ready = ready / self._params.temperature
        return ready

    def full(self) -> np.ndarray:
        raw = self._view.full_column(self._col)
        ready = apply_penalties(raw, self._state, self._params)
        if self._params.temperature != 1.0:
            ready = ready / self._params.temperature
        return ready

    def full_naive(self) -> np.ndarray:
        """Whole-vocabulary pass that rebuilds histograms from scratch."""
        raw = self._view.full_column(self._col)
        ready = apply_penalties_full_rebuild(raw, self._state, self._params)
        if self._params.temperature != 1.0:
            ready = ready / self._params.temperature
        return ready


def _global_filter_draw(ready_col, params_eff, u, counter):
    fmap, probs, local = filtered_draw(ready_col, params_eff, float(u), DOMAIN_FULL_VOCAB, counter)
    return int(fmap.forward[local]), float(np.log(probs[local]))


def _naive_global_filter_draw(ready_col, params_eff, u, counter):
    """Reference-semantics truncation via a deliberate full sort and full
    softmax (the baseline variant's cost profile)."""
    z = np.asarray(ready_col, dtype=np.float64)
    n = z.shape[0]
    if counter is not None:
        counter.add(n)
    order = np.argsort(-z, kind="stable")
    w = np.exp(z[order] - z[order[0]])
    probs_full = w / w.sum()
    kept = n if params_eff.top_k <= 0 else min(params_eff.top_k, n)
    if params_eff.top_p < 1.0 or params_eff.min_p > 0.0:
        if params_eff.top_p < 1.0:
            cum = np.cumsum(w[:kept])
            threshold = params_eff.top_p * cum[-1]
            kept = min(kept, int(np.searchsorted(cum, threshold, side="left")) + 1)
        if params_eff.min_p > 0.0:
            floor = params_eff.min_p * w[0]
            kept = min(kept, int(np.searchsorted(-w, -floor, side="right")))
        kept = max(1, kept)
    probs = probs_full[:kept] / probs_full[:kept].sum()
    local = categorical_draw(probs, float(u))
    return int(order[local]), float(np.log(probs[local]))


class _Sampler:
    """One ablation variant's per-sequence decision procedure.

    When truncation filters are neutral every variant funnels the final draw
    through the shared hot/tail decomposition, so tokens are identical across
    variants for the same uniforms; the variants differ in how they compute
    the penalized column and the candidate ordering. With truncation active,
    the full-pass variants filter over the whole vocabulary while the
    speculative variant filters inside each sub-vocabulary.
    """

    def __init__(self, variant: str, hot: HotVocab, counter: VisitCounter | None = None):
        self.variant = variant
        self.hot = hot
        self.counter = counter

    def _plans(self, view):
        key = (view.blocks[0].v_hi - view.blocks[0].v_lo, len(view.blocks))
        plans = self.hot.plan_cache.get(key)
        if plans is None:
            plans = (
                GatherPlan(self.hot.hot_ids, key[0], key[1]),
                GatherPlan(self.hot.tail_ids, key[0], key[1]),
            )
            self.hot.plan_cache[key] = plans
        return plans

    def _tail_preselect(self, view, col, state, params, tail_plan):
        """Top-k tail draw from a provably sufficient candidate subset.

        Any untouched tail element below the raw (k + |touched|)-th largest is
        strictly dominated by at least k untouched candidates whose penalized
        value equals their raw value, so it cannot reach the filtered set.
        Candidates keep ascending tail positions, preserving the canonical tie
        order of the full-tail filter.
        """
        k = params.top_k
        hot = self.hot
        if k == TOP_K_DISABLED or k >= hot.tail_size:
            return None
        raw = view.gather_planned(tail_plan, col)
        touched_pos = hot.tail_inverse[state.touched_id_view()]
        touched_pos = touched_pos[touched_pos >= 0]
        widened = k + touched_pos.shape[0]
        n = raw.shape[0]
        if widened >= n:
            return None
        boundary = np.partition(raw, n - widened)[n - widened]
        candidates = np.flatnonzero(raw >= boundary)
        if touched_pos.shape[0]:
            candidates = np.union1d(candidates, touched_pos)
        values = apply_penalties_at(raw[candidates], hot.tail_ids[candidates], state, params)
        if params.temperature != 1.0:
            values = values / params.temperature
        return values, candidates

    def sample(
        self,
        view,
        col: int,
        seq_id: int,
        state: SequenceState,
        params: SamplingParams,
        draws,
        iteration_id: int,
        eos_ids=frozenset(),
    ) -> TokenDecision:
        column = ReadyColumn(view, col, state, params)
        row_max = view.row_max(col)
        total = view.total_expsum(col)
        neutral = params.filters_neutral(state.vocab_size)

        if self.variant == VARIANT_SHVS:
            hot_plan, tail_plan = self._plans(view)
            hot = self.hot

            def ready_slice(plan, position_of, id_of_position):
                raw = view.gather_planned(plan, col)
                ready = apply_penalties_indexed(raw, position_of, id_of_position, state, params)
                if params.temperature != 1.0:
                    ready = ready / params.temperature
                return ready

            def tail_values():
                candidates = self._tail_preselect(view, col, state, params, tail_plan)
                if candidates is None:
                    return ready_slice(tail_plan, hot.tail_inverse, hot.tail_ids)
                return candidates

            token, accepted, logprob, _ = split_decision(
                ready_slice(hot_plan, hot.inverse, hot.hot_ids),
                tail_values,
                hot,
                params,
                row_max,
                total,
                draws,
                self.counter,
            )
        else:
            if self.variant in (VARIANT_BASELINE_FULL, VARIANT_PARALLEL_FULL):
                ready = column.full_naive()
                # the naive path orders the whole vocabulary every step
                if neutral:
                    np.argsort(-ready, kind="stable")
            else:
                ready = column.full()
            if self.counter is not None:
                self.counter.add(state.vocab_size)
            params_eff = params if params.temperature == 1.0 else replace(params, temperature=1.0)
            if neutral:
                token, accepted, logprob, _ = split_decision(
                    ready[self.hot.hot_ids],
                    lambda: ready[self.hot.tail_ids],
                    self.hot,
                    params,
                    row_max,
                    total,
                    draws,
                    None,
                )
                accepted = False  # flag reserved for the speculative variant
            elif self.variant in (VARIANT_BASELINE_FULL, VARIANT_PARALLEL_FULL):
                token, logprob = _naive_global_filter_draw(ready, params_eff, draws[0], None)
                accepted = False
            else:
                token, logprob = _global_filter_draw(ready, params_eff, draws[0], None)
                accepted = False

        if self.counter is not None:
            self.counter.count_token()
        return TokenDecision(
            iteration_id=iteration_id,
            seq_id=seq_id,
            token_id=token,
            is_eos=token in eos_ids,
            accepted_hot=accepted,
            logprob=logprob,
        )


# ---------------------------------------------------------------------------
# logits sources

_DOMAIN_PERMUTE = 7


def synthetic_hot_ordering(seed: int, vocab_size: int) -> np.ndarray:
    """Seed-keyed global token ranking, hottest first.

    Independent of the logits source so trace replays and remote-driven runs
    use the same hot set as the synthetic run that produced the trace.
    """
    u = rng.keyed_uniform_block(seed, _DOMAIN_PERMUTE, 0, 0, vocab_size)
    return np.argsort(u, kind="stable").astype(np.int64)


class SyntheticSource:
    """Deterministic Zipf-shaped logits with keyed per-row noise.

    Token ranks follow a seed-keyed global permutation; the base score of the
    rank-r token is -s * ln(r + 1) and every (iteration, sequence, token) gets
    independent Gumbel noise, all derived from the counter RNG so rows never
    depend on worker or shard counts.
    """

    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        v = cfg.vocab_size
        self.rank_to_token = synthetic_hot_ordering(cfg.seed, v)
        base_by_rank = -cfg.zipf_exponent * np.log(np.arange(1, v + 1, dtype=np.float64))
        self.base = np.empty(v, dtype=np.float64)
        self.base[self.rank_to_token] = base_by_rank

    def hot_ordering(self) -> np.ndarray:
        return self.rank_to_token

    def column(self, iteration_id: int, seq_id: int) -> np.ndarray:
        u = rng.keyed_uniform_block(self.cfg.seed, rng.DOMAIN_LOGITS, iteration_id, seq_id, self.cfg.vocab_size)
        u = np.maximum(u, 2.0**-60)
        gumbel = -np.log(-np.log(u))
        return self.base + self.cfg.noise_scale * gumbel

    def matrix(self, iteration_id: int, seq_ids) -> np.ndarray:
        cols = [self.column(iteration_id, s) for s in seq_ids]
        return np.stack(cols, axis=1)


def make_shard_blocks(
    cfg: EngineConfig,
    iteration_id: int,
    matrix_f64: np.ndarray,
    states: list[SequenceState],
    params_for,
) -> list[LogitsShardBlock]:
    """Cast a full V x B matrix to wire f32 shards and precompute the per-row
    summaries on the sampling-ready scale from the f32-rounded values, exactly
    as samplers will see them."""
    v, batch = matrix_f64.shape
    wire = np.asfortranarray(matrix_f64.astype(np.float32))
    row_max = np.empty(batch, dtype=np.float64)
    expsum = np.empty(batch, dtype=np.float64)
    for b in range(batch):
        params = params_for(b)
        ready = apply_penalties(wire[:, b].astype(np.float64), states[b], params)
        if params.temperature != 1.0:
            ready = ready / params.temperature
        row_max[b], expsum[b] = row_summary(ready)
    blocks = []
    for rank, (lo, hi) in enumerate(shard_ranges(v, cfg.tp_degree)):
        blocks.append(
            LogitsShardBlock(
                iteration_id=iteration_id,
                rank=rank,
                v_lo=lo,
                v_hi=hi,
                values=wire[lo:hi, :],
                row_max=row_max.copy(),
                total_expsum=expsum.copy(),
                tp_degree=cfg.tp_degree,
            )
        )
    return blocks


# ---------------------------------------------------------------------------
# engine


@dataclass
class EngineStats:
    iterations: int = 0
    decisions_total: int = 0
    accepted_total: int = 0
    sampler_busy: float = 0.0
    driver_busy: float = 0.0
    wall_start: float = field(default_factory=time.monotonic)
    acceptance_window: deque = field(default_factory=lambda: deque(maxlen=4096))

    def acceptance_rate(self) -> float:
        if not self.acceptance_window:
            raise ValueError("empty acceptance window")
        return sum(self.acceptance_window) / len(self.acceptance_window)

    def tokens_per_sampler_second(self) -> float:
        if self.sampler_busy <= 0:
            return 0.0
        return self.decisions_total / self.sampler_busy

    def overlap_ratio(self) -> float:
        """Share of decision-plane work that ran while compute was busy
        (driver time standing in for the compute stage)."""
        total = self.sampler_busy + self.driver_busy
        return 0.0 if total == 0 else min(1.0, self.driver_busy / total)


class Engine:
    """Lockstep iteration engine with m sampler worker threads."""

    def __init__(self, cfg: EngineConfig):
        cfg.validate()
        self.cfg = cfg
        self.params_table = {0: cfg.sampling_params()}
        self.eos_ids = frozenset() if cfg.eos_ignore else frozenset(cfg.eos_token_ids)
        self.iteration_id = 0
        self.stats = EngineStats()
        self.counters = [VisitCounter() for _ in range(cfg.samplers)]
        self._worker_busy = [0.0] * cfg.samplers

        self.states: dict[int, SequenceState] = {}
        self.active: list[int] = []
        for seq_id in range(cfg.batch_size):
            self.states[seq_id] = new_sequence_state(seq_id, [], cfg.vocab_size, cfg.max_tokens)
            self.active.append(seq_id)

        self.source = None
        self._trace_frames = None
        if cfg.logits_source == SOURCE_SYNTHETIC:
            self.source = SyntheticSource(cfg)
        elif cfg.logits_source == SOURCE_TRACE:
            self._trace_frames = _read_trace_frames(cfg.trace_path)

        self.master_hot = self._build_master_hot()
        hot_size = cfg.hot_size if cfg.hot_size > 0 else self.master_hot.size
        self.hot = self.master_hot.resize(hot_size)
        self._pending_hot_size: int | None = None

        # one scheduling ring and one logits ring fan out to all workers;
        # each worker owns a single-producer return ring
        self.sched_ring = RingBuffer(cfg.ring_capacity)
        logits_cap = 1
        while logits_cap < cfg.ring_capacity * max(1, cfg.tp_degree):
            logits_cap <<= 1
        self.logits_ring = RingBuffer(logits_cap)
        self.return_rings = [RingBuffer(cfg.ring_capacity) for _ in range(cfg.samplers)]
        self._sched_cursors = [self.sched_ring.register_consumer() for _ in range(cfg.samplers)]
        self._logits_cursors = [self.logits_ring.register_consumer() for _ in range(cfg.samplers)]
        self._return_cursors = [ring.register_consumer() for ring in self.return_rings]

        self._worker_errors: list[tuple[int, BaseException]] = []
        self._fault_hook = None  # test injection point: fn(worker_id, iteration_id)
        self._stop = threading.Event()
        self.workers = [
            threading.Thread(target=self._worker_loop, args=(j,), daemon=True, name=f"sampler-{j}")
            for j in range(cfg.samplers)
        ]
        for w in self.workers:
            w.start()

    # -- setup ----------------------------------------------------------

    def _build_master_hot(self) -> HotVocab:
        cfg = self.cfg
        if cfg.hot_path:
            trace = load_hot_vocab_trace(cfg.hot_path)
            return build_hot_vocab(trace, cfg.vocab_size, cfg.vocab_size)
        return HotVocab(cfg.vocab_size, synthetic_hot_ordering(cfg.seed, cfg.vocab_size))

    # -- control ---------------------------------------------------------

    def apply_control(self, key: str, value: str) -> str:
        """Control channel: changes land at the next iteration boundary."""
        if key == "hot_size":
            size = int(value)
            if size < 1 or size > self.master_hot.size:
                raise ControlError(f"hot_size {size} outside [1, {self.master_hot.size}]")
            self._pending_hot_size = size
            return f"hot_size={size} pending"
        raise ControlError(f"unknown control key {key!r}")

    # -- iteration --------------------------------------------------------

    def _scheduling_output(self) -> SchedulingOutput:
        seqs = [
            SeqDescriptor(seq_id=s, params_ref=0, history_cursor=self.states[s].generated_len)
            for s in self.active
        ]
        return SchedulingOutput(self.iteration_id, seqs)

    def _produce_blocks(self, sched: SchedulingOutput) -> list[LogitsShardBlock]:
        cfg = self.cfg
        states = [self.states[d.seq_id] for d in sched.seqs]
        if cfg.logits_source == SOURCE_SYNTHETIC:
            matrix = self.source.matrix(sched.iteration_id, [d.seq_id for d in sched.seqs])
            return make_shard_blocks(cfg, sched.iteration_id, matrix, states, lambda b: self.params_table[0])
        if cfg.logits_source == SOURCE_TRACE:
            return self._next_trace_blocks(sched)
        raise EngineError("external source: feed blocks via run_external_iteration")

    def _next_trace_blocks(self, sched: SchedulingOutput) -> list[LogitsShardBlock]:
        if not self._trace_frames:
            raise EndOfTraceError("trace exhausted")
        frames = self._trace_frames.pop(0)
        blocks = [f.block for f in frames if isinstance(f, LogitsShardFrame)]
        if len(blocks) != self.cfg.tp_degree:
            raise EngineError(f"trace iteration has {len(blocks)} shards, expected {self.cfg.tp_degree}")
        if blocks[0].batch_size != sched.batch_size:
            raise EngineError("trace batch size does not match active sequences")
        return blocks

    def run_iteration(self) -> list[TokenDecision]:
        """Drive one full iteration; returns decisions in batch order."""
        if not self.active:
            raise EngineError("no active sequences")
        if self._pending_hot_size is not None:
            self.hot = self.master_hot.resize(self._pending_hot_size)
            self._pending_hot_size = None

        sched = self._scheduling_output()
        t0 = time.monotonic()
        blocks = self._produce_blocks(sched)
        self.stats.driver_busy += time.monotonic() - t0
        return self._dispatch_and_collect(sched, blocks)

    def run_external_iteration(self, sched: SchedulingOutput, blocks: list[LogitsShardBlock]) -> list[TokenDecision]:
        """Serve path: sequences and logits supplied by a remote client."""
        for d in sched.seqs:
            if d.seq_id not in self.states:
                self.states[d.seq_id] = new_sequence_state(
                    d.seq_id, [], self.cfg.vocab_size, self.cfg.max_tokens
                )
        self.active = [d.seq_id for d in sched.seqs]
        self.iteration_id = sched.iteration_id
        if self._pending_hot_size is not None:
            self.hot = self.master_hot.resize(self._pending_hot_size)
            self._pending_hot_size = None
        return self._dispatch_and_collect(sched, blocks)

    def _dispatch_and_collect(self, sched: SchedulingOutput, blocks: list[LogitsShardBlock]) -> list[TokenDecision]:
        cfg = self.cfg
        self.sched_ring.push(sched)
        ranges = shard_ranges(cfg.vocab_size, cfg.tp_degree)
        for block in blocks:
            write_logits_shard(self.logits_ring, block, ranges)

        order = [d.seq_id for d in sched.seqs]
        ledger = DecisionLedger(sched.iteration_id, order)
        deadline = time.monotonic() + 60.0
        for j in range(cfg.samplers):
            while True:
                if self._worker_errors:
                    wid, err = self._worker_errors[0]
                    raise EngineError(f"iteration {sched.iteration_id} aborted: worker {wid}: {err!r}") from err
                try:
                    batch = self.return_rings[j].next(self._return_cursors[j], timeout=0.25)
                    break
                except TransportError:
                    if time.monotonic() > deadline:
                        raise EngineError(
                            f"iteration {sched.iteration_id} stalled waiting for worker {j}"
                        ) from None
            if batch is None:
                raise EngineError("return ring closed mid-iteration")
            ledger.record(batch)
        if not ledger.complete():
            missing = sorted(set(order) - set(ledger.seen))
            raise EngineError(f"iteration {sched.iteration_id} incomplete; missing seqs {missing}")

        self.stats.sampler_busy = self.sampler_busy_seconds()
        decisions = ledger.decisions_in_batch_order(order)
        for d in decisions:
            self.stats.decisions_total += 1
            accepted = 1 if d.accepted_hot else 0
            self.stats.accepted_total += accepted
            self.stats.acceptance_window.append(accepted)
        self.stats.iterations += 1
        self.iteration_id = sched.iteration_id + 1
        if not cfg.eos_ignore:
            self.active = [
                s
                for s, d in zip(order, decisions)
                if not d.is_eos and self.states[s].generated_len < cfg.max_tokens
            ]
        return decisions

    # -- worker side -------------------------------------------------------

    def _worker_loop(self, worker_id: int) -> None:
        while not self._stop.is_set():
            try:
                sched = self.sched_ring.next(self._sched_cursors[worker_id], timeout=0.25)
            except TransportError:
                continue  # idle poll; check the stop flag again
            if sched is None:
                return
            try:
                frames = []
                for _ in range(self.cfg.tp_degree):
                    f = self.logits_ring.next(self._logits_cursors[worker_id], timeout=30.0)
                    if f is None:
                        return
                    frames.append(f)
                self._run_worker_iteration(worker_id, sched, frames)
            except BaseException as exc:  # surface to the scheduler, fail-stop
                self._worker_errors.append((worker_id, exc))
                return

    def _run_worker_iteration(self, worker_id: int, sched: SchedulingOutput, frames) -> None:
        cfg = self.cfg
        if self._fault_hook is not None:
            self._fault_hook(worker_id, sched.iteration_id)
        parts = partition_batch(sched.batch_size, cfg.samplers)
        lo, hi = parts[worker_id]
        if lo == hi:
            commit_decisions(self.return_rings[worker_id], DecisionBatch(sched.iteration_id, []))
            return
        view = assemble_view(frames, (lo, hi), expected_t=cfg.tp_degree)
        sampler = _Sampler(cfg.variant, self.hot, self.counters[worker_id])
        t0 = time.monotonic()
        decisions = []
        for col, b in enumerate(range(lo, hi)):
            desc = sched.seqs[b]
            state = self.states[desc.seq_id]
            if desc.history_cursor != state.generated_len:
                raise EngineError(
                    f"malformed scheduling frame: seq {desc.seq_id} cursor "
                    f"{desc.history_cursor} != history {state.generated_len}"
                )
            params = self.params_table[desc.params_ref]
            draws = rng.pregenerate_slice(params.seed, sched.iteration_id, [desc.seq_id])[0]
            decision = sampler.sample(
                view, col, desc.seq_id, state, params, draws, sched.iteration_id, self.eos_ids
            )
            update_output_histogram(state, decision.token_id)
            decisions.append(decision)
        self._worker_busy[worker_id] += time.monotonic() - t0
        commit_decisions(
            self.return_rings[worker_id],
            DecisionBatch(sched.iteration_id, decisions),
            expected_seq_ids=[sched.seqs[b].seq_id for b in range(lo, hi)],
        )

    # -- observability --------------------------------------------------------

    def sampler_busy_seconds(self) -> float:
        return sum(self._worker_busy)

    def total_visits(self) -> int:
        return sum(c.total for c in self.counters)

    def visits_per_token(self) -> float:
        tokens = sum(c.tokens for c in self.counters)
        if tokens == 0:
            raise ZeroDivisionError("no tokens sampled yet")
        return self.total_visits() / tokens

    # -- lifecycle ----------------------------------------------------------

    def close(self) -> None:
        self._stop.set()
        for ring in (self.sched_ring, self.logits_ring, *self.return_rings):
            ring.close()
        for w in self.workers:
            w.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# trace record / replay


def record_trace(cfg: EngineConfig, iterations: int, path: str) -> list[list[TokenDecision]]:
    """Run the engine and write each iteration's scheduling + shard frames.

    Returns the per-iteration decisions so callers can cross-check replays.
    """
    all_decisions = []
    with Engine(cfg) as engine, open(path, "wb") as fh:
        for _ in range(iterations):
            sched = engine._scheduling_output()
            blocks = engine._produce_blocks(sched)
            fh.write(encode_frame(sched))
            for block in blocks:
                fh.write(encode_frame(LogitsShardFrame(block)))
            all_decisions.append(engine._dispatch_and_collect(sched, blocks))
    return all_decisions


def _read_trace_frames(path: str) -> list[list]:
    """Group trace frames by iteration: [sched, shard, shard, ...] per entry."""
    reader = FrameReader()
    frames = []
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(1 << 20)
            if not chunk:
                break
            frames.extend(reader.feed(chunk))
    if reader.pending_bytes:
        raise EngineError(f"trace file has {reader.pending_bytes} trailing bytes")
    grouped = []
    current = None
    for frame in frames:
        if isinstance(frame, SchedulingOutput):
            if current is not None:
                grouped.append(current)
            current = [frame]
        elif isinstance(frame, LogitsShardFrame):
            if current is None:
                raise EngineError("trace begins with a shard frame")
            current.append(frame)
        else:
            raise EngineError(f"unexpected frame in trace: {type(frame).__name__}")
    if current is not None:
        grouped.append(current)
    return grouped


def run_engine(cfg: EngineConfig, iterations: int) -> list[list[TokenDecision]]:
    """Convenience runner returning per-iteration decisions."""
    out = []
    with Engine(cfg) as engine:
        for _ in range(iterations):
            out.append(engine.run_iteration())
    return out
