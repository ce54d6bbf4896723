"""Deterministic counter-based uniform variates keyed by (seed, iteration, sequence, draw).

Samplers never share RNG state: every uniform is a pure function of its key,
so token outputs cannot depend on how many workers consume the batch or in
which order they run. The same keys can be evaluated one at a time or
pre-generated as a block; both paths are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MULT_A = 0xBF58476D1CE4E5B9
_MULT_B = 0x94D049BB133111EB

# Key domains keep sampler draws and synthetic-logits noise on disjoint streams.
DOMAIN_SAMPLER = 0
DOMAIN_LOGITS = 1
DOMAIN_ARRIVALS = 2

# Per (iteration, sequence) budget: hot draw, accept test, tail draw.
DRAWS_PER_SEQUENCE = 3


@dataclass(frozen=True)
class DrawKey:
    """Key for one uniform variate. draw_index is 0 (hot), 1 (accept) or 2 (tail)."""

    seed: int
    iteration_id: int
    seq_id: int
    draw_index: int


def _mix(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MULT_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MULT_B) & _MASK64
    return z ^ (z >> 31)


def _hash_fields(seed: int, domain: int, iteration_id: int, seq_id: int, counter: int) -> int:
    h = _mix((seed & _MASK64) ^ _GOLDEN)
    h = _mix(h ^ (domain & _MASK64))
    h = _mix(h ^ (iteration_id & _MASK64))
    h = _mix(h ^ (seq_id & _MASK64))
    h = _mix(h ^ (counter & _MASK64))
    return h


def _to_unit(h: int) -> float:
    # top 53 bits -> [0, 1) at full double resolution
    return (h >> 11) * (1.0 / (1 << 53))


def draw(key: DrawKey) -> float:
    """Uniform in [0, 1) for a sampler draw key. Pure function of the key."""
    h = _hash_fields(key.seed, DOMAIN_SAMPLER, key.iteration_id, key.seq_id, key.draw_index)
    return _to_unit(h)


def keyed_uniform(seed: int, domain: int, iteration_id: int, seq_id: int, counter: int) -> float:
    """Uniform in [0, 1) on an arbitrary key domain (internal streams)."""
    return _to_unit(_hash_fields(seed, domain, iteration_id, seq_id, counter))


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MULT_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MULT_B)
    return z ^ (z >> np.uint64(31))


def _hash_fields_array(
    seed: int, domain: int, iteration_id: int, seq_ids: np.ndarray, counters: np.ndarray
) -> np.ndarray:
    # scalar absorption up to the iteration field, then vectorized rounds
    h = _mix((seed & _MASK64) ^ _GOLDEN)
    h = _mix(h ^ (domain & _MASK64))
    h = _mix(h ^ (iteration_id & _MASK64))
    hv = np.full(seq_ids.shape, h, dtype=np.uint64)
    hv = _mix_array(hv ^ seq_ids.astype(np.uint64))
    hv = _mix_array(hv ^ counters.astype(np.uint64))
    return hv


def _unit_array(h: np.ndarray) -> np.ndarray:
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def pregenerate_slice(seed: int, iteration_id: int, seq_range) -> np.ndarray:
    """Uniform block of shape [len(seq_range), 3], bit-identical to per-key draws.

    Any partition of the sequence ids across workers yields the same
    per-sequence triples, since values depend only on the keys.
    """
    seq_ids = list(seq_range)
    n = len(seq_ids)
    if n <= 8:  # vectorization overhead dominates tiny slices
        out = np.empty((n, DRAWS_PER_SEQUENCE), dtype=np.float64)
        for row, seq in enumerate(seq_ids):
            for idx in range(DRAWS_PER_SEQUENCE):
                out[row, idx] = _to_unit(
                    _hash_fields(seed, DOMAIN_SAMPLER, iteration_id, int(seq), idx)
                )
        return out
    seqs = np.repeat(np.asarray(seq_ids, dtype=np.uint64), DRAWS_PER_SEQUENCE)
    idxs = np.tile(np.arange(DRAWS_PER_SEQUENCE, dtype=np.uint64), n)
    h = _hash_fields_array(seed, DOMAIN_SAMPLER, iteration_id, seqs, idxs)
    return _unit_array(h).reshape(n, DRAWS_PER_SEQUENCE)


def keyed_uniform_block(seed: int, domain: int, iteration_id: int, seq_id: int, count: int) -> np.ndarray:
    """Vectorized uniforms for counters 0..count-1 on one (domain, iteration, seq) key."""
    counters = np.arange(count, dtype=np.uint64)
    seqs = np.full(count, seq_id, dtype=np.uint64)
    return _unit_array(_hash_fields_array(seed, domain, iteration_id, seqs, counters))


def format_probe_line(seed: int, iteration_id: int, seq_id: int, draw_index: int) -> str:
    u = draw(DrawKey(seed, iteration_id, seq_id, draw_index))
    return f"{seed} {iteration_id} {seq_id} {draw_index} {u.hex()}"


def write_probe_file(path, probes) -> None:
    """Golden probe file: one `seed iter seq idx hexfloat` line per probe."""
    with open(path, "w", encoding="utf-8") as fh:
        for seed, it, seq, idx in probes:
            fh.write(format_probe_line(seed, it, seq, idx) + "\n")


def check_probe_file(path) -> list[str]:
    """Re-evaluate every probe line; return mismatch descriptions (empty = pass)."""
    bad = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            seed_s, it_s, seq_s, idx_s, hexval = line.split()
            expect = format_probe_line(int(seed_s), int(it_s), int(seq_s), int(idx_s))
            if expect.split()[-1] != hexval:
                bad.append(f"line {lineno}: expected {expect.split()[-1]}, file has {hexval}")
    return bad
