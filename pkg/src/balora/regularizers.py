"""BA-LoRA regularizers and composite objectives, expressed on autodiff nodes.

Every loss accepts nodes or plain arrays. Reference-model inputs (``f_p``,
``p_p``) are always detached: they enter the tape as constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from balora import autodiff as ad
from balora.errors import ConfigInvalid, ShapeMismatch, ZeroMatrix

EntropySign = Literal["entropy_minimizing", "entropy_maximizing"]
TaskMode = Literal["NLU", "NLG"]


@dataclass(frozen=True)
class RegConfig:
    lambda1: float = 1e-4
    lambda2: float = 4e-4
    lambda3: float = 1e-4
    k_frac: float = 0.3
    alpha: float = 0.1
    entropy_sign: EntropySign = "entropy_maximizing"
    task_mode: TaskMode = "NLU"

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be >= 0")
        if not 0.0 < self.k_frac <= 1.0:
            raise ConfigInvalid(f"k_frac must lie in (0, 1], got {self.k_frac}")
        if self.entropy_sign not in ("entropy_minimizing", "entropy_maximizing"):
            raise ConfigInvalid(f"unknown entropy_sign {self.entropy_sign!r}")
        if self.task_mode not in ("NLU", "NLG"):
            raise ConfigInvalid(f"unknown task_mode {self.task_mode!r}")

    @classmethod
    def defaults(cls, task_mode: TaskMode = "NLU", **overrides) -> "RegConfig":
        """Published defaults: NLU uses lambda2 = 4e-4, NLG uses 3e-4."""
        base = dict(task_mode=task_mode, lambda2=4e-4 if task_mode == "NLU" else 3e-4)
        base.update(overrides)
        return cls(**base)

    def with_lambdas(self, l1: float, l2: float, l3: float) -> "RegConfig":
        d = asdict(self)
        d.update(lambda1=l1, lambda2=l2, lambda3=l3)
        return RegConfig(**d)

    def k_count(self, shape: tuple[int, int]) -> int:
        """Number of leading singular values: ``max(1, round(k_frac * min(shape)))``, half-up."""
        p = min(shape)
        return min(p, max(1, int(math.floor(self.k_frac * p + 0.5))))


def _tape_of(*xs) -> ad.Tape:
    for x in xs:
        if isinstance(x, ad.Node):
            return x.tape
    return ad.Tape()


def _node(tape: ad.Tape, x) -> ad.Node:
    return x if isinstance(x, ad.Node) else tape.constant(np.asarray(x, dtype=np.float64))


def _detached(tape: ad.Tape, x) -> ad.Node:
    return tape.constant(x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=np.float64))


def cr_nlu(f_p, f_f) -> ad.Node:
    """Batch-mean squared distance between row-normalized reference and fine-tuned logits."""
    tape = _tape_of(f_f, f_p)
    fp, ff = _detached(tape, f_p), _node(tape, f_f)
    if fp.shape != ff.shape:
        raise ShapeMismatch(f"cr_nlu: {fp.shape} vs {ff.shape}")
    diff = ad.l2_normalize_rows(fp) - ad.l2_normalize_rows(ff)
    return ad.scale(ad.sum_sq(diff), 1.0 / ff.shape[0])


def dr_nlu(f_f) -> ad.Node:
    """Squared off-diagonal covariance mass of the output columns, divided by D."""
    tape = _tape_of(f_f)
    ff = _node(tape, f_f)
    return ad.scale(ad.offdiag_sq_sum(ad.covariance(ff)), 1.0 / ff.shape[1])


def _top_k_ratio(ff: ad.Node, cfg: RegConfig) -> tuple[ad.Node, ad.Node]:
    s = ad.svd_values(ff)
    total = ad.sum_(s)
    if float(total.value) == 0.0:
        raise ZeroMatrix("singular-value regularizer needs a nonzero matrix")
    k = cfg.k_count(ff.shape)
    top = s[:k]
    return ad.div(ad.sum_(top), total), top


def svdr_nlu(f_f, cfg: RegConfig) -> ad.Node:
    """Negative share of the top-k singular values in the total spectrum."""
    tape = _tape_of(f_f)
    ratio, _ = _top_k_ratio(_node(tape, f_f), cfg)
    return -ratio


def cr_nlg(p_p, p_f) -> ad.Node:
    """Row-mean ``KL(reference || fine-tuned)``."""
    tape = _tape_of(p_f, p_p)
    return ad.mean(ad.kl_rows(_detached(tape, p_p), _node(tape, p_f)))


def dr_nlg(p_f, cfg: RegConfig) -> ad.Node:
    """Row-mean entropy, negated under ``entropy_maximizing`` so minimizing raises entropy."""
    tape = _tape_of(p_f)
    h = ad.mean(ad.entropy_rows(_node(tape, p_f)))
    return h if cfg.entropy_sign == "entropy_minimizing" else -h


def svdr_nlg(f_f, cfg: RegConfig) -> ad.Node:
    """``-(top-k share + alpha * Var(top-k singular values))``, population variance."""
    tape = _tape_of(f_f)
    ratio, top = _top_k_ratio(_node(tape, f_f), cfg)
    return -(ratio + ad.scale(ad.variance(top), cfg.alpha))


def objective_nlu(task_loss, f_p, f_f, cfg: RegConfig) -> ad.Node:
    if cfg.task_mode != "NLU":
        raise ConfigInvalid("objective_nlu requires task_mode NLU")
    tape = _tape_of(task_loss, f_f)
    loss, f_f = _node(tape, task_loss), _node(tape, f_f)
    return (
        loss
        + ad.scale(cr_nlu(f_p, f_f), cfg.lambda1)
        + ad.scale(dr_nlu(f_f), cfg.lambda2)
        + ad.scale(svdr_nlu(f_f, cfg), cfg.lambda3)
    )


def objective_nlg(task_loss, p_p, p_f, f_f, cfg: RegConfig) -> ad.Node:
    if cfg.task_mode != "NLG":
        raise ConfigInvalid("objective_nlg requires task_mode NLG")
    tape = _tape_of(task_loss, p_f, f_f)
    loss, p_f, f_f = _node(tape, task_loss), _node(tape, p_f), _node(tape, f_f)
    return (
        loss
        + ad.scale(cr_nlg(p_p, p_f), cfg.lambda1)
        + ad.scale(dr_nlg(p_f, cfg), cfg.lambda2)
        + ad.scale(svdr_nlg(f_f, cfg), cfg.lambda3)
    )
