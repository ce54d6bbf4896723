import numpy as np
import pytest

from decplane.core import (
    RangeError,
    SamplingParams,
    new_sequence_state,
    shard_ranges,
    validate_params,
)


def naive_histogram(tokens, vocab_size):
    hist = [0] * vocab_size
    for t in tokens:
        hist[t] += 1
    return hist


def test_empty_prompt():
    st = new_sequence_state(0, [], 4)
    assert st.prompt_hist.tolist() == [0, 0, 0, 0]
    assert st.prompt_mask.tolist() == [False] * 4


def test_prompt_histogram_example():
    st = new_sequence_state(0, [1, 1, 3], 4)
    assert st.prompt_hist.tolist() == [0, 2, 0, 1]
    assert st.prompt_mask.tolist() == [False, True, False, True]
    assert st.output_hist.sum() == 0
    assert not st.output_mask.any()


def test_prompt_out_of_range():
    with pytest.raises(RangeError):
        new_sequence_state(0, [5], 4)
    with pytest.raises(RangeError):
        new_sequence_state(0, [-1], 4)


def test_prompt_matches_naive_oracle():
    rs = np.random.default_rng(0)
    for _ in range(50):
        v = int(rs.integers(1, 40))
        prompt = rs.integers(0, v, size=int(rs.integers(0, 30))).tolist()
        st = new_sequence_state(0, prompt, v)
        assert st.prompt_hist.tolist() == naive_histogram(prompt, v)
        assert st.prompt_mask.tolist() == [c > 0 for c in naive_histogram(prompt, v)]


def test_validate_neutral_params_ok():
    assert validate_params(SamplingParams(), 100) == []


def test_validate_reports_each_violation():
    errs = validate_params(SamplingParams(temperature=0.0), 10)
    assert errs == ["temperature must be positive"]
    errs = validate_params(SamplingParams(top_k=11), 10)
    assert errs == ["top_k exceeds vocabulary"]
    # several violations reported together, not just the first
    errs = validate_params(
        SamplingParams(temperature=-1, top_k=99, top_p=0.0, min_p=1.0, rep_penalty=0.0), 10
    )
    assert len(errs) == 5


def test_neutral_flags():
    p = SamplingParams()
    assert p.penalties_neutral() and p.filters_neutral(50)
    assert not SamplingParams(rep_penalty=1.5).penalties_neutral()
    assert not SamplingParams(top_k=5).filters_neutral(50)
    assert SamplingParams(top_k=50).filters_neutral(50)
    trunc = SamplingParams(top_k=3, top_p=0.5, min_p=0.2).without_truncation()
    assert trunc.filters_neutral(50)


def test_shard_ranges_tiling():
    assert shard_ranges(8, 4) == [(0, 2), (2, 4), (4, 6), (6, 8)]
    assert shard_ranges(8, 1) == [(0, 8)]
    with pytest.raises(ValueError):
        shard_ranges(10, 4)


def test_consistency_checker():
    st = new_sequence_state(3, [0, 2, 2], 5)
    st.check_consistency()
