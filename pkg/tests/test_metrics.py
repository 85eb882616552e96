import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrep.metrics import ScoreFileError, TrialScore, compute_eer, compute_min_dcf, read_scores

from oracles import eer_sweep, min_dcf_sweep


def trials(targets, nontargets):
    return [TrialScore("target", float(s)) for s in targets] + [TrialScore("nontarget", float(s)) for s in nontargets]


class TestEer:
    def test_separated(self):
        assert compute_eer(trials([0.9, 0.8], [0.1, 0.2])) == 0.0

    def test_mixed_example(self):
        assert compute_eer(trials([0.9, 0.8, 0.3], [0.6, 0.2, 0.1])) == pytest.approx(1 / 3, abs=1e-15)

    def test_fully_inverted(self):
        assert compute_eer(trials([0.0, 0.1], [0.8, 0.9])) == 1.0

    def test_symmetry(self, rng):
        tar, non = rng.normal(1, 1, 30), rng.normal(0, 1, 40)
        assert compute_eer(trials(tar, non)) == pytest.approx(compute_eer(trials(-non, -tar)), abs=1e-15)

    def test_single_class(self):
        with pytest.raises(ValueError, match="at least one"):
            compute_eer(trials([0.5], []))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            TrialScore("target", float("nan"))

    def test_order_independent(self, rng):
        ts = trials(rng.normal(1, 1, 20), rng.normal(0, 1, 25))
        shuffled = [ts[i] for i in rng.permutation(len(ts))]
        assert compute_eer(ts) == compute_eer(shuffled)


class TestMinDcf:
    def test_separated(self):
        assert compute_min_dcf(trials([0.9, 0.8], [0.1, 0.2])) == 0.0

    def test_all_equal(self):
        assert compute_min_dcf(trials([0.5, 0.5], [0.5, 0.5, 0.5])) == 1.0

    @pytest.mark.parametrize("p,cm,cf", [(0.001, 1, 1), (0.01, 1, 1), (0.5, 1, 1), (0.05, 10, 1)])
    def test_small_set_against_sweep(self, p, cm, cf):
        tar, non = [0.9, 0.8, 0.3, 0.55], [0.6, 0.2, 0.1, 0.4, 0.3]
        assert compute_min_dcf(trials(tar, non), p, cm, cf) == float(min_dcf_sweep(tar, non, p, cm, cf))

    def test_bounded_by_one(self, rng):
        ts = trials(rng.normal(0, 1, 15), rng.normal(0, 1, 15))
        assert 0.0 <= compute_min_dcf(ts, 0.01) <= 1.0

    @pytest.mark.parametrize("kwargs", [dict(p_target=0.0), dict(p_target=1.0), dict(c_miss=0.0), dict(c_fa=-1.0)])
    def test_bad_operating_point(self, kwargs):
        with pytest.raises(ValueError):
            compute_min_dcf(trials([1.0], [0.0]), **kwargs)


def test_exhaustive_small_grid():
    """All 2+2 splits over {0,1,2}: exact agreement with the sweep."""
    grid = (0.0, 1.0, 2.0)
    for tar in itertools.product(grid, repeat=2):
        for non in itertools.product(grid, repeat=2):
            assert compute_eer(trials(tar, non)) == float(eer_sweep(tar, non))
            assert compute_min_dcf(trials(tar, non), 0.01) == float(min_dcf_sweep(tar, non, 0.01, 1, 1))


@settings(max_examples=150, deadline=None)
@given(tar=st.lists(st.integers(-3, 3), min_size=1, max_size=8),
       non=st.lists(st.integers(-3, 3), min_size=1, max_size=8),
       p=st.sampled_from([0.001, 0.01, 0.1, 0.5]))
def test_matches_sweep_oracle(tar, non, p):
    ts = trials(tar, non)
    assert compute_eer(ts) == float(eer_sweep(tar, non))
    assert compute_min_dcf(ts, p) == float(min_dcf_sweep(tar, non, p, 1, 1))


class TestScoreFile:
    def test_parse(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("# header\ntarget 0.9\n\nnontarget -1.5e-1\n")
        assert read_scores(path) == [TrialScore("target", 0.9), TrialScore("nontarget", -0.15)]

    @pytest.mark.parametrize("body,line", [
        ("target 0.9\nimpostor 0.1\n", 2),
        ("target 0.9\nnontarget\n", 2),
        ("target abc\n", 1),
        ("# c\ntarget 1\nnontarget inf\n", 3),
        ("target 1 2\n", 1),
    ])
    def test_malformed(self, tmp_path, body, line):
        path = tmp_path / "s.txt"
        path.write_text(body)
        with pytest.raises(ScoreFileError) as info:
            read_scores(path)
        assert info.value.line == line
        assert f"line {line}" in str(info.value)


def test_matches_numpy_sweep_on_continuous_scores():
    rng = np.random.default_rng(3)
    tar, non = rng.normal(1.5, 1, 200), rng.normal(0, 1, 300)
    eer = compute_eer(trials(tar, non))
    # FAR and FRR straddle the EER at the crossing threshold
    t = np.sort(np.concatenate([tar, non]))
    far = np.array([(non >= x).mean() for x in t])
    frr = np.array([(tar < x).mean() for x in t])
    k = np.argmax(frr >= far)
    assert min(far[k], frr[k - 1]) - 1e-12 <= eer <= max(frr[k], far[k - 1]) + 1e-12
