import numpy as np
import pytest

from decplane.core import RangeError, SamplingParams, new_sequence_state
from decplane.penalty import (
    apply_penalties,
    apply_penalties_at,
    apply_penalties_full_rebuild,
    apply_penalties_indexed,
    apply_presence_frequency,
    apply_repetition_penalty,
    update_output_histogram,
)


def oracle_penalize(logits, prompt, history, rep, pres, freq):
    """Single-shot reference: rebuild counts from scratch, walk every index."""
    v = len(logits)
    cp = [0] * v
    co = [0] * v
    for t in prompt:
        cp[t] += 1
    for t in history:
        co[t] += 1
    out = []
    for i in range(v):
        z = float(logits[i])
        if cp[i] > 0 or co[i] > 0:
            z = z / rep
        if co[i] > 0:
            z = z - pres
            z = z - freq * co[i]
        out.append(z)
    return out


def test_first_token():
    st = new_sequence_state(0, [], 2)
    update_output_histogram(st, 1)
    assert st.output_hist.tolist() == [0, 1]
    assert st.output_mask.tolist() == [False, True]
    assert st.generated_len == 1


def test_double_append():
    st = new_sequence_state(0, [], 4)
    update_output_histogram(st, 3)
    update_output_histogram(st, 3)
    assert st.output_hist[3] == 2
    st.check_consistency()


def test_out_of_range_token():
    st = new_sequence_state(0, [], 4)
    with pytest.raises(RangeError):
        update_output_histogram(st, 4)


def test_thousand_random_appends_match_rebuild():
    rs = np.random.default_rng(1)
    v = 64
    st = new_sequence_state(0, [], v)
    history = []
    for _ in range(1000):
        tok = int(rs.integers(0, v))
        update_output_histogram(st, tok)
        history.append(tok)
    rebuilt = np.bincount(np.array(history), minlength=v)
    np.testing.assert_array_equal(st.output_hist, rebuilt)
    np.testing.assert_array_equal(st.output_mask, rebuilt > 0)


def test_update_locality():
    st = new_sequence_state(0, [], 16)
    update_output_histogram(st, 5)
    before_h = st.output_hist.copy()
    before_m = st.output_mask.copy()
    update_output_histogram(st, 9)
    dh = np.flatnonzero(st.output_hist != before_h)
    dm = np.flatnonzero(st.output_mask != before_m)
    assert dh.tolist() == [9] and dm.tolist() == [9]


def test_repetition_neutral_is_bitwise_identity():
    st = new_sequence_state(0, [1], 3)
    z = np.array([2.0, -1.0, 0.0])
    out = apply_repetition_penalty(z, st, 1.0)
    assert out.tobytes() == z.tobytes()


def test_repetition_hand_example():
    st = new_sequence_state(0, [0], 3)
    out = apply_repetition_penalty(np.array([2.0, -1.0, 0.0]), st, 2.0)
    assert out.tolist() == [1.0, -1.0, 0.0]


def test_repetition_all_tokens():
    st = new_sequence_state(0, [0, 1, 2], 3)
    out = apply_repetition_penalty(np.array([2.0, -1.0, 0.0]), st, 2.0)
    assert out.tolist() == [1.0, -0.5, 0.0]


def test_division_raises_negative_logits():
    # dividing a negative logit by rep > 1 makes it LARGER (less penalized);
    # intentional fidelity to the divisive form
    st = new_sequence_state(0, [0], 1)
    out = apply_repetition_penalty(np.array([-2.0]), st, 2.0)
    assert out[0] == -1.0 and out[0] > -2.0


def test_presence_frequency_examples():
    st = new_sequence_state(0, [], 2)
    update_output_histogram(st, 0)
    update_output_histogram(st, 0)
    out = apply_presence_frequency(np.array([1.0, 1.0]), st, 0.5, 0.1)
    np.testing.assert_allclose(out, [0.3, 1.0], atol=1e-15)

    st2 = new_sequence_state(0, [], 2)
    z = np.array([1.0, 1.0])
    assert apply_presence_frequency(z, st2, 0.7, 0.9).tobytes() == z.tobytes()
    assert apply_presence_frequency(z, st, 0.0, 0.0).tobytes() == z.tobytes()


def test_compose_example():
    st = new_sequence_state(0, [0], 3)
    params = SamplingParams(rep_penalty=2.0, presence_penalty=0.5)
    out = apply_penalties(np.array([2.0, -1.0, 0.0]), st, params)
    # token 0 in prompt only: repetition applies, presence does not (no output yet)
    assert out.tolist() == [1.0, -1.0, 0.0]
    update_output_histogram(st, 0)
    out = apply_penalties(np.array([2.0, -1.0, 0.0]), st, params)
    assert out.tolist() == [0.5, -1.0, 0.0]


def test_neutral_params_bitwise_identity():
    st = new_sequence_state(0, [1, 2], 8)
    update_output_histogram(st, 4)
    z = np.array([0.1, -0.2, 0.3, 7.0, -0.0, 2.0, -3.0, 0.0])
    out = apply_penalties(z, st, SamplingParams())
    assert out.tobytes() == z.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_histories_match_oracle(seed):
    rs = np.random.default_rng(seed)
    v = 32
    prompt = rs.integers(0, v, size=5).tolist()
    st = new_sequence_state(0, prompt, v)
    history = []
    params = SamplingParams(rep_penalty=1.7, presence_penalty=0.3, frequency_penalty=0.05)
    for step in range(200):
        z = rs.standard_normal(v)
        got = apply_penalties(z, st, params)
        want = oracle_penalize(z, prompt, history, 1.7, 0.3, 0.05)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
        tok = int(rs.integers(0, v))
        update_output_histogram(st, tok)
        history.append(tok)


def test_incremental_dense_sparse_all_bitwise_equal():
    rs = np.random.default_rng(7)
    v = 48
    st = new_sequence_state(0, [3, 3, 9], v)
    params = SamplingParams(rep_penalty=1.3, presence_penalty=0.2, frequency_penalty=0.01)
    for _ in range(100):
        update_output_histogram(st, int(rs.integers(0, v)))
    z = rs.standard_normal(v)
    dense = apply_penalties_full_rebuild(z, st, params)
    sparse = apply_penalties(z, st, params)
    assert dense.tobytes() == sparse.tobytes()
    ids = rs.permutation(v)[:20]
    sliced = apply_penalties_at(z[ids], ids, st, params)
    assert sliced.tobytes() == sparse[ids].tobytes()
    position_of = np.full(v, -1, dtype=np.int64)
    position_of[ids] = np.arange(ids.shape[0])
    indexed = apply_penalties_indexed(z[ids], position_of, ids, st, params)
    assert indexed.tobytes() == sparse[ids].tobytes()


def test_composition_of_separate_ops_matches_apply_penalties():
    rs = np.random.default_rng(3)
    v = 16
    st = new_sequence_state(0, [1], v)
    for _ in range(10):
        update_output_histogram(st, int(rs.integers(0, v)))
    z = rs.standard_normal(v)
    params = SamplingParams(rep_penalty=2.5, presence_penalty=0.4, frequency_penalty=0.2)
    step = apply_repetition_penalty(z, st, 2.5)
    step = apply_presence_frequency(step, st, 0.4, 0.2)
    assert step.tobytes() == apply_penalties(z, st, params).tobytes()
