"""Ring-buffer data plane and the byte-exact wire protocol.

Three frame streams connect the producer, the samplers, and the scheduler:
scheduling outputs, vocabulary-major logits shards, and decision batches, plus
a control stream. In-process rings carry structured frames whose array
payloads are shared (consumers slice views, never copy); the same frames
encode to a versioned little-endian byte format for trace files, golden
fixtures, and socket transport.

Frame layout (little-endian):
    u32 magic 0x53494D50, u16 version=1, u16 frame_type, u64 iteration_id,
    u32 payload_len, payload bytes, u32 CRC32(payload)

Payloads:
    SchedulingOutput: u32 B, then per sequence u64 seq_id, u32 params_ref,
        u32 history_cursor, u8 flags
    LogitsShard: u16 rank, u16 t, u32 v_lo, u32 v_hi, u32 B,
        row_max[B] f64, total_expsum[B] f64, values f32 vocabulary-major
    DecisionBatch: u32 count, then per entry u64 seq_id, u32 token_id,
        u8 flags (bit0 eos, bit1 accepted_hot, bit2 has_logprob),
        f32 logprob when bit2 set; an empty batch encodes a zero-length
        payload (24-byte frame)
    Control: UTF-8 `key=value` lines
"""

from __future__ import annotations

import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import LogitsShardBlock, TokenDecision
from .instrument import CopyCounter

MAGIC = 0x53494D50  # "SIMP"
PROTOCOL_VERSION = 1
HEADER_LEN = 20

FRAME_SCHEDULING = 1
FRAME_LOGITS_SHARD = 2
FRAME_DECISION_BATCH = 3
FRAME_CONTROL = 4

_HEADER = struct.Struct("<IHHQI")

FLAG_EOS = 0x01
FLAG_ACCEPTED_HOT = 0x02
FLAG_HAS_LOGPROB = 0x04


class TransportError(Exception):
    pass


class BadMagicError(TransportError):
    pass


class VersionMismatchError(TransportError):
    pass


class TruncatedPayloadError(TransportError):
    pass


class ChecksumError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class IncompleteIterationError(TransportError):
    pass


@dataclass(frozen=True)
class SeqDescriptor:
    seq_id: int
    params_ref: int = 0
    history_cursor: int = 0
    flags: int = 0


@dataclass
class SchedulingOutput:
    """Compact per-iteration batch description fanned out to every worker."""

    iteration_id: int
    seqs: list[SeqDescriptor]

    def __post_init__(self):
        if len(self.seqs) < 1:
            raise ProtocolError("scheduling output needs at least one sequence")
        ids = [s.seq_id for s in self.seqs]
        if len(set(ids)) != len(ids):
            raise ProtocolError("duplicate seq_id in scheduling output")

    @property
    def batch_size(self) -> int:
        return len(self.seqs)


@dataclass
class DecisionBatch:
    iteration_id: int
    decisions: list[TokenDecision]


@dataclass
class ControlFrame:
    iteration_id: int
    entries: dict[str, str]


@dataclass
class LogitsShardFrame:
    block: LogitsShardBlock

    @property
    def iteration_id(self) -> int:
        return self.block.iteration_id


Frame = object  # SchedulingOutput | LogitsShardFrame | DecisionBatch | ControlFrame


def partition_batch(batch_size: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous column ranges, sizes differing by at most one, larger first."""
    if batch_size < 1 or workers < 1:
        raise ValueError("batch size and worker count must be >= 1")
    base, rem = divmod(batch_size, workers)
    ranges = []
    lo = 0
    for j in range(workers):
        size = base + (1 if j < rem else 0)
        ranges.append((lo, lo + size))
        lo += size
    return ranges


# ---------------------------------------------------------------------------
# encoding / decoding


def _frame_bytes(frame_type: int, iteration_id: int, payload: bytes) -> bytes:
    header = _HEADER.pack(MAGIC, PROTOCOL_VERSION, frame_type, iteration_id, len(payload))
    return header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def encode_frame(frame) -> bytes:
    """Serialize any frame object to wire bytes."""
    if isinstance(frame, SchedulingOutput):
        parts = [struct.pack("<I", frame.batch_size)]
        for s in frame.seqs:
            parts.append(struct.pack("<QIIB", s.seq_id, s.params_ref, s.history_cursor, s.flags))
        return _frame_bytes(FRAME_SCHEDULING, frame.iteration_id, b"".join(parts))

    if isinstance(frame, LogitsShardFrame):
        b = frame.block
        b.validate()
        head = struct.pack("<HHIII", b.rank, b.tp_degree, b.v_lo, b.v_hi, b.batch_size)
        row_max = np.ascontiguousarray(b.row_max, dtype="<f8").tobytes()
        expsum = np.ascontiguousarray(b.total_expsum, dtype="<f8").tobytes()
        values = np.asfortranarray(b.values, dtype="<f4").tobytes(order="F")
        return _frame_bytes(FRAME_LOGITS_SHARD, b.iteration_id, head + row_max + expsum + values)

    if isinstance(frame, DecisionBatch):
        if not frame.decisions:
            return _frame_bytes(FRAME_DECISION_BATCH, frame.iteration_id, b"")
        parts = [struct.pack("<I", len(frame.decisions))]
        for d in frame.decisions:
            flags = (FLAG_EOS if d.is_eos else 0) | (FLAG_ACCEPTED_HOT if d.accepted_hot else 0)
            if d.logprob is not None:
                flags |= FLAG_HAS_LOGPROB
            parts.append(struct.pack("<QIB", d.seq_id, d.token_id, flags))
            if d.logprob is not None:
                parts.append(struct.pack("<f", d.logprob))
        return _frame_bytes(FRAME_DECISION_BATCH, frame.iteration_id, b"".join(parts))

    if isinstance(frame, ControlFrame):
        text = "".join(f"{k}={v}\n" for k, v in frame.entries.items())
        return _frame_bytes(FRAME_CONTROL, frame.iteration_id, text.encode("utf-8"))

    raise TypeError(f"cannot encode {type(frame).__name__}")


def _need(buf: bytes, offset: int, size: int) -> None:
    if offset + size > len(buf):
        raise TruncatedPayloadError(f"payload ends at {len(buf)}, need {offset + size}")


def decode_frame(data: bytes):
    """Decode one complete frame; raises a specific TransportError on damage."""
    if len(data) < HEADER_LEN:
        raise TruncatedPayloadError("short header")
    magic, version, frame_type, iteration_id, payload_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"magic 0x{magic:08X}")
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(f"frame version {version}, expected {PROTOCOL_VERSION}")
    total = HEADER_LEN + payload_len + 4
    if len(data) < total:
        raise TruncatedPayloadError(f"frame needs {total} bytes, have {len(data)}")
    payload = data[HEADER_LEN : HEADER_LEN + payload_len]
    (crc,) = struct.unpack_from("<I", data, HEADER_LEN + payload_len)
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise ChecksumError("payload CRC32 mismatch")

    if frame_type == FRAME_SCHEDULING:
        _need(payload, 0, 4)
        (count,) = struct.unpack_from("<I", payload, 0)
        seqs = []
        off = 4
        for _ in range(count):
            _need(payload, off, 17)
            seq_id, params_ref, cursor, flags = struct.unpack_from("<QIIB", payload, off)
            seqs.append(SeqDescriptor(seq_id, params_ref, cursor, flags))
            off += 17
        return SchedulingOutput(iteration_id, seqs)

    if frame_type == FRAME_LOGITS_SHARD:
        _need(payload, 0, 16)
        rank, tp_degree, v_lo, v_hi, batch = struct.unpack_from("<HHIII", payload, 0)
        rows = v_hi - v_lo
        off = 16
        _need(payload, off, 8 * batch * 2 + 4 * rows * batch)
        row_max = np.frombuffer(payload, dtype="<f8", count=batch, offset=off).copy()
        off += 8 * batch
        expsum = np.frombuffer(payload, dtype="<f8", count=batch, offset=off).copy()
        off += 8 * batch
        flat = np.frombuffer(payload, dtype="<f4", count=rows * batch, offset=off)
        values = flat.reshape((rows, batch), order="F").copy(order="F")
        block = LogitsShardBlock(iteration_id, rank, v_lo, v_hi, values, row_max, expsum, tp_degree)
        return LogitsShardFrame(block)

    if frame_type == FRAME_DECISION_BATCH:
        if payload_len == 0:
            return DecisionBatch(iteration_id, [])
        _need(payload, 0, 4)
        (count,) = struct.unpack_from("<I", payload, 0)
        off = 4
        decisions = []
        for _ in range(count):
            _need(payload, off, 13)
            seq_id, token_id, flags = struct.unpack_from("<QIB", payload, off)
            off += 13
            logprob = None
            if flags & FLAG_HAS_LOGPROB:
                _need(payload, off, 4)
                (logprob,) = struct.unpack_from("<f", payload, off)
                off += 4
            decisions.append(
                TokenDecision(
                    iteration_id=iteration_id,
                    seq_id=seq_id,
                    token_id=token_id,
                    is_eos=bool(flags & FLAG_EOS),
                    accepted_hot=bool(flags & FLAG_ACCEPTED_HOT),
                    logprob=logprob,
                )
            )
        if off != payload_len:
            raise ProtocolError("decision batch payload has trailing bytes")
        return DecisionBatch(iteration_id, decisions)

    if frame_type == FRAME_CONTROL:
        entries = {}
        for line in payload.decode("utf-8").splitlines():
            if not line:
                continue
            if "=" not in line:
                raise ProtocolError(f"control line without '=': {line!r}")
            k, v = line.split("=", 1)
            entries[k] = v
        return ControlFrame(iteration_id, entries)

    raise ProtocolError(f"unknown frame type {frame_type}")


def frame_length(header: bytes) -> int:
    """Total frame size implied by a 20-byte header."""
    if len(header) < HEADER_LEN:
        raise TruncatedPayloadError("short header")
    magic, version, _, _, payload_len = _HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise BadMagicError(f"magic 0x{magic:08X}")
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(f"frame version {version}, expected {PROTOCOL_VERSION}")
    return HEADER_LEN + payload_len + 4


class FrameReader:
    """Incremental frame splitter for byte streams (sockets, trace files)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < HEADER_LEN:
                break
            need = frame_length(bytes(self._buf[:HEADER_LEN]))
            if len(self._buf) < need:
                break
            frames.append(decode_frame(bytes(self._buf[:need])))
            del self._buf[:need]
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# in-process rings


class RingBuffer:
    """Bounded in-order frame channel: one producer, per-consumer cursors.

    The producer blocks (never overwrites) when the slowest registered
    consumer is a full capacity behind; the stall counter records how often.
    """

    def __init__(self, capacity: int):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two")
        self.capacity = capacity
        self._slots: list = [None] * capacity
        self._head = 0  # next write position (monotonic)
        self._cursors: list[int] = []
        self._cond = threading.Condition()
        self.producer_stalls = 0
        self._closed = False

    def register_consumer(self) -> int:
        with self._cond:
            self._cursors.append(self._head)
            return len(self._cursors) - 1

    def _min_cursor(self) -> int:
        return min(self._cursors) if self._cursors else self._head

    def push(self, frame, timeout: float | None = None) -> None:
        with self._cond:
            if self._head - self._min_cursor() >= self.capacity:
                self.producer_stalls += 1
                ok = self._cond.wait_for(
                    lambda: self._head - self._min_cursor() < self.capacity or self._closed,
                    timeout,
                )
                if not ok:
                    raise TransportError("ring full: consumer stalled past timeout")
            if self._closed:
                raise TransportError("ring closed")
            self._slots[self._head % self.capacity] = frame
            self._head += 1
            self._cond.notify_all()

    def next(self, consumer_id: int, timeout: float | None = None):
        """Next frame for this consumer, in publication order; None on close."""
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._cursors[consumer_id] < self._head or self._closed, timeout
            )
            if not ok:
                raise TransportError("ring read timeout")
            if self._cursors[consumer_id] >= self._head and self._closed:
                return None
            frame = self._slots[self._cursors[consumer_id] % self.capacity]
            self._cursors[consumer_id] += 1
            self._cond.notify_all()
            return frame

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def write_logits_shard(ring: RingBuffer, block: LogitsShardBlock, expected_ranges=None) -> None:
    """Publish one shard frame; visible to consumers only once fully written."""
    block.validate()
    if expected_ranges is not None:
        if block.rank >= len(expected_ranges) or (block.v_lo, block.v_hi) != expected_ranges[block.rank]:
            raise ProtocolError(
                f"shard range [{block.v_lo}, {block.v_hi}) inconsistent with rank {block.rank}"
            )
    ring.push(LogitsShardFrame(block))


def commit_decisions(ring: RingBuffer, batch: DecisionBatch, expected_seq_ids=None) -> None:
    """Publish a worker's decisions for one iteration."""
    if expected_seq_ids is not None:
        got = {d.seq_id for d in batch.decisions}
        if got != set(expected_seq_ids):
            raise ProtocolError(f"decision batch covers {sorted(got)}, expected {sorted(expected_seq_ids)}")
    ring.push(batch)


class DecisionLedger:
    """Scheduler-side duplicate/completeness guard for one iteration."""

    def __init__(self, iteration_id: int, expected_seq_ids):
        self.iteration_id = iteration_id
        self.expected = set(expected_seq_ids)
        self.seen: dict[int, TokenDecision] = {}

    def record(self, batch: DecisionBatch) -> None:
        if batch.iteration_id != self.iteration_id:
            raise ProtocolError(
                f"decision batch for iteration {batch.iteration_id}, expected {self.iteration_id}"
            )
        for d in batch.decisions:
            if d.seq_id in self.seen:
                raise ProtocolError(f"duplicate decision for (iter {self.iteration_id}, seq {d.seq_id})")
            if d.seq_id not in self.expected:
                raise ProtocolError(f"decision for unknown seq {d.seq_id}")
            self.seen[d.seq_id] = d

    def complete(self) -> bool:
        return set(self.seen) == self.expected

    def decisions_in_batch_order(self, order) -> list[TokenDecision]:
        return [self.seen[seq_id] for seq_id in order]


# ---------------------------------------------------------------------------
# zero-copy shard assembly


class GatherPlan:
    """Precomputed shard split for repeated gathers of a fixed id set."""

    __slots__ = ("width", "nshards", "size", "per_shard", "flat_local")

    def __init__(self, ids: np.ndarray, width: int, nshards: int):
        ids = np.asarray(ids, dtype=np.int64)
        self.width = width
        self.nshards = nshards
        self.size = ids.shape[0]
        self.flat_local = ids if nshards == 1 else None
        self.per_shard = []
        if nshards > 1:
            shard_idx = ids // width
            local = ids % width
            for r in range(nshards):
                pos = np.flatnonzero(shard_idx == r)
                self.per_shard.append((pos, local[pos]))


@dataclass
class AssembledLogitsView:
    """Logical V x |B_j| view over t shard blocks restricted to one column range.

    Elements are addressed with stride arithmetic only; building the view
    copies nothing (column restriction is numpy basic slicing). row_max and
    total_expsum are per-column vectors shared by all shards.
    """

    blocks: list[LogitsShardBlock]
    col_lo: int
    col_hi: int
    copy_counter: CopyCounter = field(default_factory=CopyCounter)

    def __post_init__(self):
        if not self.blocks:
            raise IncompleteIterationError("no shards supplied")
        blocks = sorted(self.blocks, key=lambda b: b.v_lo)
        it = blocks[0].iteration_id
        expect_lo = 0
        width = blocks[0].v_hi - blocks[0].v_lo
        for b in blocks:
            if b.iteration_id != it:
                raise IncompleteIterationError("shards from mixed iterations")
            if b.v_lo != expect_lo or (b.v_hi - b.v_lo) != width:
                raise IncompleteIterationError(
                    f"shard tiling broken at [{b.v_lo}, {b.v_hi}), expected lo {expect_lo}"
                )
            expect_lo = b.v_hi
        self.blocks = blocks
        self._width = width
        self._col_views = [b.values[:, self.col_lo : self.col_hi] for b in blocks]
        self.vocab_size = expect_lo

    @property
    def num_cols(self) -> int:
        return self.col_hi - self.col_lo

    def element(self, v: int, col: int) -> float:
        return float(self._col_views[v // self._width][v % self._width, col])

    def shard_slices(self, col: int):
        """Yield (v_lo, float32 column view) per shard; views share ring memory."""
        for b, view in zip(self.blocks, self._col_views):
            yield b.v_lo, view[:, col]

    def gather(self, ids: np.ndarray, col: int) -> np.ndarray:
        """Gather raw f32 values at full-vocab ids for one column (as float64).

        This is sampling work proportional to len(ids); it does not count as
        an assembly copy.
        """
        plan = GatherPlan(np.asarray(ids), self._width, len(self.blocks))
        return self.gather_planned(plan, col).astype(np.float64)

    def gather_planned(self, plan: "GatherPlan", col: int) -> np.ndarray:
        """Gather with a precomputed shard split (hot-path form of gather).

        Returns the wire float32 values; converting once downstream (the
        penalty copy) avoids an extra full pass.
        """
        if plan.width != self._width or plan.nshards != len(self.blocks):
            raise ValueError("gather plan built for a different shard layout")
        if plan.nshards == 1:
            # column of an F-order block is contiguous: fastest 1D gather
            return self._col_views[0][:, col][plan.flat_local]
        out = np.empty(plan.size, dtype=np.float32)
        for r, view in enumerate(self._col_views):
            pos, local = plan.per_shard[r]
            if pos.shape[0]:
                out[pos] = view[:, col][local]
        return out

    def full_column(self, col: int) -> np.ndarray:
        """Materialize one column as float64 (compute scratch for full passes)."""
        out = np.empty(self.vocab_size, dtype=np.float64)
        for b, view in zip(self.blocks, self._col_views):
            out[b.v_lo : b.v_hi] = view[:, col]
        return out

    def row_max(self, col: int) -> float:
        return float(self.blocks[0].row_max[self.col_lo + col])

    def total_expsum(self, col: int) -> float:
        return float(self.blocks[0].total_expsum[self.col_lo + col])

    def materialize_matrix(self) -> np.ndarray:
        """Debug helper: copy the full V x |B_j| block (counted as copies)."""
        self.copy_counter.add(self.vocab_size * self.num_cols)
        return np.concatenate([v.astype(np.float32) for v in self._col_views], axis=0)


def assemble_view(shards, col_range: tuple[int, int], expected_t: int | None = None) -> AssembledLogitsView:
    """Stitch an iteration's shard blocks into a zero-copy column-range view."""
    blocks = [s.block if isinstance(s, LogitsShardFrame) else s for s in shards]
    if expected_t is not None and len(blocks) != expected_t:
        raise IncompleteIterationError(f"have {len(blocks)} shards, expected {expected_t}")
    return AssembledLogitsView(blocks=blocks, col_lo=col_range[0], col_hi=col_range[1])
