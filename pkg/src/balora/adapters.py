"""LoRA and PiSSA adapters, merge-back, and NF4 quantization error."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from balora import linalg
from balora.errors import RankTooLarge, ShapeMismatch

AdapterKind = Literal["lora", "pissa"]

# 16-level NormalFloat code: normal quantiles rescaled to [-1, 1], with an exact zero.
NF4_LEVELS = (
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
)


@dataclass
class AdapterPair:
    """Trainable ``a`` (m x r) and ``b`` (r x n) on top of a frozen ``base`` (m x n).

    The effective weight is ``base + (alpha / r) * a @ b``.
    """

    a: np.ndarray
    b: np.ndarray
    base: np.ndarray
    r: int
    kind: AdapterKind
    alpha: float
    sigma: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        m, n = self.base.shape
        if self.a.shape != (m, self.r) or self.b.shape != (self.r, n):
            raise ShapeMismatch(
                f"adapter shapes a{self.a.shape} b{self.b.shape} do not fit base {self.base.shape} at r={self.r}"
            )
        _check_rank(m, n, self.r)

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape

    def n_trainable(self) -> int:
        return self.a.size + self.b.size


def _check_rank(m: int, n: int, r: int) -> None:
    if r < 1 or r > min(m, n):
        raise RankTooLarge(f"rank {r} outside [1, {min(m, n)}] for a {m}x{n} weight")


def lora_init(
    m: int,
    n: int,
    r: int,
    sigma: float | None = None,
    seed: int = 0,
    *,
    base: np.ndarray | None = None,
    alpha: float | None = None,
) -> AdapterPair:
    """Gaussian ``a`` with std ``sigma`` (default ``1/sqrt(r)``), zero ``b``."""
    _check_rank(m, n, r)
    if sigma is None:
        sigma = 1.0 / math.sqrt(r)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if base is None:
        base = np.zeros((m, n))
    base = linalg.as_matrix(base, name="base")
    if base.shape != (m, n):
        raise ShapeMismatch(f"base shape {base.shape} != ({m}, {n})")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, sigma, size=(m, r))
    return AdapterPair(
        a=a,
        b=np.zeros((r, n)),
        base=base.copy(),
        r=r,
        kind="lora",
        alpha=float(r if alpha is None else alpha),
        sigma=float(sigma),
        seed=seed,
    )


def pissa_init(w, r: int, *, alpha: float | None = None) -> AdapterPair:
    """Split ``w`` into its top-``r`` singular triplets (trainable) and a frozen residual.

    ``a = U_r S_r^(1/2)``, ``b = S_r^(1/2) V_r^T``, ``base = U_rest S_rest V_rest^T``.
    When ``alpha != r`` both factors are divided by ``sqrt(alpha / r)`` so the
    merged weight still equals ``w``.
    """
    w = linalg.as_matrix(w, name="W")
    m, n = w.shape
    _check_rank(m, n, r)
    f = linalg.svd(w)
    root = np.sqrt(f.s[:r])
    a = f.u[:, :r] * root
    b = root[:, None] * f.v[:, :r].T
    base = (f.u[:, r:] * f.s[r:]) @ f.v[:, r:].T
    alpha = float(r if alpha is None else alpha)
    if alpha != r:
        fix = math.sqrt(alpha / r)
        a, b = a / fix, b / fix
    return AdapterPair(a=a, b=b, base=base, r=r, kind="pissa", alpha=alpha)


def adapter_forward(x, p: AdapterPair) -> np.ndarray:
    """``x @ (base + scale * a @ b)`` without forming the merged weight."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.base.shape[0]:
        raise ShapeMismatch(f"input {x.shape} incompatible with adapter of shape {p.shape}")
    return x @ p.base + p.scale * ((x @ p.a) @ p.b)


def merge(p: AdapterPair) -> np.ndarray:
    return p.base + p.scale * (p.a @ p.b)


def checksum(arr: np.ndarray) -> str:
    """SHA-256 over dtype, shape and raw bytes."""
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Nf4Codebook:
    levels: tuple[float, ...] = NF4_LEVELS
    block_size: int = 64

    def __post_init__(self) -> None:
        lv = np.asarray(self.levels, dtype=np.float64)
        if lv.shape != (16,):
            raise ValueError("NF4 codebook needs exactly 16 levels")
        if lv[0] != -1.0 or lv[-1] != 1.0 or not np.all(np.diff(lv) > 0) or 0.0 not in lv:
            raise ValueError("levels must ascend strictly from -1 to 1 and include 0")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")

    @property
    def midpoints(self) -> np.ndarray:
        lv = np.asarray(self.levels)
        return 0.5 * (lv[1:] + lv[:-1])


def nf4_quantize(w, cb: Nf4Codebook = Nf4Codebook()) -> np.ndarray:
    """Blockwise absmax NF4 round-trip; returns the dequantized matrix.

    Blocks are ``cb.block_size`` consecutive row-major entries. Exact midpoints
    round to the lower level.
    """
    w = np.asarray(w, dtype=np.float64)
    flat = w.ravel()
    size = flat.size
    bs = cb.block_size
    pad = (-size) % bs
    blocks = np.concatenate([flat, np.zeros(pad)]).reshape(-1, bs)
    absmax = np.abs(blocks).max(axis=1, keepdims=True)
    safe = np.where(absmax > 0.0, absmax, 1.0)
    scaled = blocks / safe
    idx = np.searchsorted(cb.midpoints, scaled, side="left")
    deq = np.asarray(cb.levels)[idx] * absmax
    return deq.ravel()[:size].reshape(w.shape)


def quant_error(w, cb: Nf4Codebook = Nf4Codebook()) -> float:
    """Nuclear norm of ``w - nf4(w)``."""
    w = linalg.as_matrix(w)
    return linalg.nuclear_norm(w - nf4_quantize(w, cb))
