"""Finite-difference gradient suite over every regularizer and both composite objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from balora import autodiff as ad
from balora import regularizers as reg

THRESHOLD = 1e-4
GAP_FILTER = 1e-2
STEP = 1e-5
ROWS, COLS = 8, 5


@dataclass(frozen=True)
class GradCase:
    name: str
    uses_svd: bool
    make: Callable[[np.random.Generator], Callable[[ad.Tape, ad.Node], ad.Node]]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _cases() -> list[GradCase]:
    nlu = reg.RegConfig.defaults("NLU")
    nlg = reg.RegConfig.defaults("NLG")
    nlu_unit = nlu.with_lambdas(1.0, 1.0, 1.0)
    nlg_unit = nlg.with_lambdas(1.0, 1.0, 1.0)
    nlg_var = reg.RegConfig.defaults("NLG", k_frac=0.6, alpha=0.5)

    def cr_nlu(rng):
        ref = rng.standard_normal((ROWS, COLS))
        return lambda t, x: reg.cr_nlu(ref, x)

    def cr_nlg(rng):
        ref = _softmax(rng.standard_normal((ROWS, COLS)))
        return lambda t, x: reg.cr_nlg(ref, ad.softmax_rows(x))

    def objective_nlu(cfg):
        def make(rng):
            ref = rng.standard_normal((ROWS, COLS))
            labels = rng.integers(0, COLS, size=ROWS)
            return lambda t, x: reg.objective_nlu(ad.cross_entropy(x, labels), ref, x, cfg)

        return make

    def objective_nlg(cfg):
        def make(rng):
            ref = _softmax(rng.standard_normal((ROWS, COLS)))
            labels = rng.integers(0, COLS, size=ROWS)
            return lambda t, x: reg.objective_nlg(ad.cross_entropy(x, labels), ref, ad.softmax_rows(x), x, cfg)

        return make

    return [
        GradCase("cr_nlu", False, cr_nlu),
        GradCase("dr_nlu", False, lambda rng: lambda t, x: reg.dr_nlu(x)),
        GradCase("svdr_nlu", True, lambda rng: lambda t, x: reg.svdr_nlu(x, nlu)),
        GradCase("cr_nlg", False, cr_nlg),
        GradCase("dr_nlg", False, lambda rng: lambda t, x: reg.dr_nlg(ad.softmax_rows(x), nlg)),
        GradCase("svdr_nlg", True, lambda rng: lambda t, x: reg.svdr_nlg(x, nlg_var)),
        GradCase("objective_nlu", True, objective_nlu(nlu)),
        GradCase("objective_nlu[unit]", True, objective_nlu(nlu_unit)),
        GradCase("objective_nlg", True, objective_nlg(nlg)),
        GradCase("objective_nlg[unit]", True, objective_nlg(nlg_unit)),
    ]


CASES = _cases()


@dataclass
class GradResult:
    name: str
    points: int
    worst: float
    skipped: int

    @property
    def passed(self) -> bool:
        return self.worst < THRESHOLD


def sample_point(rng: np.random.Generator, uses_svd: bool) -> tuple[np.ndarray, int]:
    """Random ``ROWS x COLS`` point; SVD cases redraw until adjacent singular gaps exceed the filter."""
    skipped = 0
    while True:
        x = rng.standard_normal((ROWS, COLS))
        if not uses_svd:
            return x, skipped
        s = np.linalg.svd(x, compute_uv=False)
        if np.min(-np.diff(s)) > GAP_FILTER and s[-1] > GAP_FILTER:
            return x, skipped
        skipped += 1


def run_suite(trials: int = 10, seed: int = 0, cases: list[GradCase] | None = None) -> list[GradResult]:
    results = []
    for i, case in enumerate(cases or CASES):
        rng = np.random.default_rng([seed, i])
        worst, skipped = 0.0, 0
        for _ in range(trials):
            x, skip = sample_point(rng, case.uses_svd)
            skipped += skip
            worst = max(worst, ad.grad_check(case.make(rng), x, STEP))
        results.append(GradResult(case.name, trials, worst, skipped))
    return results


def format_table(results: list[GradResult]) -> str:
    lines = [f"{'loss':<22} {'points':>6} {'worst_rel_err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.points:>6} {r.worst:>14.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
