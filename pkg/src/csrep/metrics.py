"""Speaker-verification scoring: EER and minimum detection cost.

A trial is accepted when its score is ``>= threshold``. Operating points are
taken at every distinct score plus ``+inf`` (reject everything), so the
miss and false-alarm counts are integers and the final interpolation and
cost evaluation can be done in exact rational arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np


class ScoreFileError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TrialScore:
    label: str  # "target" or "nontarget"
    score: float

    def __post_init__(self):
        if self.label not in ("target", "nontarget"):
            raise ValueError(f"label must be 'target' or 'nontarget', got {self.label!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


def _split(trials: Iterable[TrialScore]):
    trials = list(trials)
    tar = np.array([t.score for t in trials if t.label == "target"], dtype=np.float64)
    non = np.array([t.score for t in trials if t.label == "nontarget"], dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return tar, non


def operating_points(tar, non):
    """Integer ``(misses, false_alarms)`` at each threshold, thresholds ascending.

    The last point is ``+inf`` (everything rejected).
    """
    thresholds = np.unique(np.concatenate([tar, non]))
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    misses = np.searchsorted(tar_sorted, thresholds, side="left")           # tar < t
    fas = non.size - np.searchsorted(non_sorted, thresholds, side="left")   # non >= t
    misses = np.append(misses, tar.size)
    fas = np.append(fas, 0)
    return np.append(thresholds, np.inf), misses, fas


def compute_eer(trials: Iterable[TrialScore]) -> float:
    """Equal error rate, linearly interpolated between adjacent operating points."""
    tar, non = _split(trials)
    _, misses, fas = operating_points(tar, non)
    nt, nn = tar.size, non.size
    # sign of FRR - FAR without rounding: misses/nt - fas/nn
    diff = misses * nn - fas * nt
    k = int(np.argmax(diff >= 0))
    frr1, far1 = Fraction(int(misses[k]), nt), Fraction(int(fas[k]), nn)
    if diff[k] == 0 or k == 0:
        return float(far1)
    frr0, far0 = Fraction(int(misses[k - 1]), nt), Fraction(int(fas[k - 1]), nn)
    d0, d1 = frr0 - far0, frr1 - far1
    s = d0 / (d0 - d1)
    return float(far0 + s * (far1 - far0))


def compute_min_dcf(trials: Iterable[TrialScore], p_target: float = 0.001,
                    c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all thresholds."""
    if not 0 < p_target < 1:
        raise ValueError(f"p_target must be in (0, 1), got {p_target}")
    if not (c_miss > 0 and c_fa > 0):
        raise ValueError("costs must be positive")
    tar, non = _split(trials)
    _, misses, fas = operating_points(tar, non)
    nt, nn = tar.size, non.size
    a, b = c_miss * p_target, c_fa * (1 - p_target)
    cost = (a * misses / nt + b * fas / nn) / min(a, b)
    # exact re-evaluation of the near-minimal candidates
    near = np.flatnonzero(cost <= cost.min() * (1 + 1e-9) + 1e-300)
    fa_, fm = Fraction(c_fa), Fraction(c_miss)
    pt = Fraction(p_target)
    ea, eb = fm * pt, fa_ * (1 - pt)
    norm = min(ea, eb)
    best = min((ea * Fraction(int(misses[i]), nt) + eb * Fraction(int(fas[i]), nn)) / norm for i in near)
    return float(best)


def read_scores(path) -> list[TrialScore]:
    """Parse ``target|nontarget <score>`` lines; ``#`` lines and blanks are skipped."""
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise ScoreFileError(f"expected '<label> <score>', got {s!r}", lineno)
            label, raw = parts
            try:
                score = float(raw)
            except ValueError:
                raise ScoreFileError(f"score {raw!r} is not a number", lineno) from None
            try:
                trials.append(TrialScore(label, score))
            except ValueError as exc:
                raise ScoreFileError(str(exc), lineno) from None
    return trials
