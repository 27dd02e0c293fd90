"""Numeric check of sufficient conditions for geometric ergodicity.

The conditions only involve the envelopes beta_n = sup of the birth rate and
delta_n = inf of the death rate over configurations with n points; they are
those of the dominating simple birth-death process on the integers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

CONVERGES, DIVERGES, INCONCLUSIVE = "converges", "diverges", "inconclusive"
SATISFIED, NOT_SATISFIED = "satisfied", "not-satisfied"
RATIO_TOL = 1e-3
DEFAULT_N_TRUNC = 10_000


@dataclass(frozen=True)
class RateSequences:
    beta_n: Callable[[int], float]
    delta_n: Callable[[int], float]
    n_trunc: int = DEFAULT_N_TRUNC

    @classmethod
    def from_model(cls, model, theta=None, n_trunc: int = DEFAULT_N_TRUNC) -> "RateSequences":
        th = model.theta(theta)
        return cls(lambda n: model.bound_given_n("birth", th, n),
                   lambda n: model.lower_given_n("death", th, n), n_trunc)


@dataclass(frozen=True)
class SeriesDiagnostics:
    verdict: str
    log_partial_sum: float
    tail_ratio_min: float
    tail_ratio_max: float


@dataclass(frozen=True)
class ErgodicityReport:
    verdict: str
    delta_positive: bool
    condition_i: bool
    n0: Optional[int]
    series_a: SeriesDiagnostics  # sum beta_1..beta_{n-1} / (delta_1..delta_n)
    series_b: SeriesDiagnostics  # sum delta_1..delta_n / (beta_1..beta_n)
    condition_ii: Optional[bool]
    sqrt_series: SeriesDiagnostics
    tail_dominance: bool
    tail_from: Optional[int]
    n_trunc: int
    notes: tuple = ()

    def render(self) -> str:
        def ser(name, s):
            return (f"{name}: {s.verdict} (log partial sum {s.log_partial_sum:.6g}, "
                    f"tail ratio in [{s.tail_ratio_min:.6g}, {s.tail_ratio_max:.6g}])")
        lines = [
            f"verdict: {self.verdict}",
            f"n_trunc: {self.n_trunc}",
            f"delta_n > 0 for 1 <= n <= n_trunc: {self.delta_positive}",
            f"condition (i) beta_n = 0 eventually: {self.condition_i}"
            + (f" (from n0 = {self.n0})" if self.n0 is not None else ""),
            ser("series sum beta_1..beta_{n-1}/(delta_1..delta_n)", self.series_a),
            ser("series sum delta_1..delta_n/(beta_1..beta_n)", self.series_b),
            f"condition (ii): {'inconclusive' if self.condition_ii is None else self.condition_ii}",
            ser("square-root series", self.sqrt_series),
            f"tail dominance beta_n <= delta_(n+1): {self.tail_dominance}"
            + (f" (from N = {self.tail_from})" if self.tail_from is not None else ""),
            "assumed: Feller property of the process (not checkable numerically)",
        ]
        lines += list(self.notes)
        return "\n".join(lines)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _series(log_terms: np.ndarray, log_ratios: np.ndarray, window: int) -> SeriesDiagnostics:
    """Ratio-test verdict from the last ``window`` successive term ratios."""
    finite = log_terms[np.isfinite(log_terms)]
    lps = float(logsumexp(finite)) if finite.size else -math.inf
    if np.any(np.isposinf(log_terms)):
        return SeriesDiagnostics(DIVERGES, math.inf, math.inf, math.inf)
    tail = log_ratios[-window:]
    with np.errstate(over="ignore"):
        r = np.exp(tail)
    rmin, rmax = float(r.min()), float(r.max())
    if np.all(np.isneginf(log_terms[-window:])) or rmax < 1.0 - RATIO_TOL:
        verdict = CONVERGES
    elif rmin >= 1.0:
        verdict = DIVERGES  # terms never decrease, so they cannot tend to 0
    else:
        verdict = INCONCLUSIVE
    return SeriesDiagnostics(verdict, lps, rmin, rmax)


def _and3(*vals):
    if any(v is False for v in vals):
        return False
    if any(v is None for v in vals):
        return None
    return True


def check_ergodicity(seq: RateSequences) -> ErgodicityReport:
    N = int(seq.n_trunc)
    if N < 10:
        raise ValueError("n_trunc must be >= 10")
    n = np.arange(1, N + 2)
    beta = np.array([float(seq.beta_n(int(k))) for k in n])  # beta_1..beta_{N+1}
    delta = np.array([float(seq.delta_n(int(k))) for k in n])
    if np.any(beta < 0) or np.any(delta < 0):
        raise ValueError("rates must be non-negative")
    notes = []
    delta_pos = bool(np.all(delta[:N] > 0))
    if not delta_pos:
        bad = int(n[np.flatnonzero(delta[:N] <= 0)[0]])
        notes.append(f"precondition violated: delta_{bad} = 0")

    # condition (i): beta_n = 0 for all n0 <= n <= n_trunc
    nz = np.flatnonzero(beta[:N] > 0)
    n0 = 1 if nz.size == 0 else int(nz[-1]) + 2
    cond_i = n0 <= N
    if not cond_i:
        n0 = None

    window = max(10, N // 10)
    lb, ld = _log(beta), _log(delta)
    with np.errstate(invalid="ignore"):
        # a_n = beta_1..beta_{n-1} / (delta_1..delta_n), n = 2..N
        log_a = np.cumsum(lb[:N - 1]) - np.cumsum(ld[:N])[1:]
        log_ra = lb[1:N] - ld[2:N + 1]  # a_{n+1}/a_n = beta_n/delta_{n+1}, n = 2..N
        # b_n = delta_1..delta_n / (beta_1..beta_n), n = 1..N
        log_b = np.cumsum(ld[:N]) - np.cumsum(lb[:N])
        log_rb = ld[1:N + 1] - lb[1:N + 1]
    log_a = np.nan_to_num(log_a, nan=-np.inf)
    log_b = np.nan_to_num(log_b, nan=np.inf)
    log_ra = np.nan_to_num(log_ra, nan=-np.inf)
    log_rb = np.nan_to_num(log_rb, nan=np.inf)
    sa = _series(log_a, log_ra, window)
    sb = _series(log_b, log_rb, window)
    ss = _series(0.5 * log_a, 0.5 * log_ra, window)

    if np.any(beta[:N] == 0):
        cond_ii = False
    elif sa.verdict == CONVERGES and sb.verdict == DIVERGES:
        cond_ii = True
    elif sa.verdict == DIVERGES or sb.verdict == CONVERGES:
        cond_ii = False
    else:
        cond_ii = None

    # tail dominance: beta_n <= delta_{n+1} for all N0 <= n < n_trunc, with N0 <= n_trunc // 2
    ok = beta[:N - 1] <= delta[1:N]
    bad = np.flatnonzero(~ok)
    tail_from = 1 if bad.size == 0 else int(bad[-1]) + 2
    tail = tail_from <= N // 2
    if not tail:
        tail_from = None

    sqrt_ok = {CONVERGES: True, DIVERGES: False}.get(ss.verdict)
    main = True if cond_i else cond_ii
    overall = _and3(delta_pos, main, sqrt_ok, tail)
    verdict = {True: SATISFIED, False: NOT_SATISFIED, None: INCONCLUSIVE}[overall]
    return ErgodicityReport(verdict, delta_pos, cond_i, n0, sa, sb, cond_ii, ss, tail, tail_from, N,
                            tuple(notes))
