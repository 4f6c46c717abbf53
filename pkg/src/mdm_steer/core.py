"""Vocabulary and sequence types, noise schedules, and the masked forward process.

Sequences are plain ``np.ndarray`` token-id vectors (dtype int64). A clean
sequence contains no mask token; a masked one may. All operations are pure
given an rng handle, so they are safe to call concurrently as long as each
caller owns its rng stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Large-negative stand-in for log(0); arithmetic stays finite, comparisons
#: via :func:`is_neg_inf` treat it as -inf.
NEG_INF = -1e30


def is_neg_inf(x: float) -> bool:
    return x <= NEG_INF / 2


class DomainError(ValueError):
    """Argument outside its mathematical domain (e.g. t not in [0,1])."""


class InvalidInputError(ValueError):
    """Structurally invalid input (mask where clean required, length mismatch...)."""


class SizeError(ValueError):
    """Enumeration budget exceeded."""


class TrainingError(RuntimeError):
    """Non-finite gradient or unrecoverable state during training."""


class EstimatorDegenerateError(RuntimeError):
    """Every importance weight collapsed to -inf."""


class InvalidSampleError(RuntimeError):
    """A drawn sample fell outside a distribution's support."""


class EmptyBufferError(RuntimeError):
    """Sampling from a replay buffer with no contents."""


@dataclass(frozen=True)
class Vocabulary:
    """Token universe of ``size`` ids; the last id is the mask token."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise InvalidInputError(f"vocabulary needs >= 2 categories, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size - 1

    @property
    def n_clean(self) -> int:
        """Number of non-mask tokens."""
        return self.size - 1

    def validate_clean(self, tokens: np.ndarray):
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size < 1:
            raise InvalidInputError("sequence must be a non-empty 1-D token vector")
        if tokens.min() < 0 or tokens.max() >= self.size:
            raise InvalidInputError("token id outside vocabulary")
        if (tokens == self.mask_id).any():
            raise InvalidInputError("clean sequence contains the mask token")

    def validate_tokens(self, tokens: np.ndarray):
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size < 1:
            raise InvalidInputError("sequence must be a non-empty 1-D token vector")
        if tokens.min() < 0 or tokens.max() >= self.size:
            raise InvalidInputError("token id outside vocabulary")


def as_sequence(tokens) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64)


@dataclass(frozen=True)
class MaskedSample:
    """A (possibly) partially masked sequence together with its corruption time."""

    tokens: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise DomainError(f"time {self.t} outside [0,1]")
        object.__setattr__(self, "tokens", as_sequence(self.tokens))

    def mask_flags(self, vocab: Vocabulary) -> np.ndarray:
        return self.tokens == vocab.mask_id


@dataclass(frozen=True)
class NoiseSchedule:
    """Invertible survival probability alpha(t), alpha(0)=1, alpha(1)=0.

    ``linear`` is alpha(t)=1-t. ``log-linear`` is alpha(t)=exp(-sigma(t)) with
    sigma(t) the geometric interpolation sigma_min^(1-t) * sigma_max^t, with
    hard clamping so the endpoint contract holds exactly.
    """

    kind: str = "linear"
    sigma_min: float = 1e-4
    sigma_max: float = 20.0

    def __post_init__(self):
        if self.kind not in ("linear", "log-linear"):
            raise InvalidInputError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "log-linear" and not (0 < self.sigma_min < self.sigma_max):
            raise InvalidInputError("log-linear schedule needs 0 < sigma_min < sigma_max")

    def alpha(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"time {t} outside [0,1]")
        if self.kind == "linear":
            return 1.0 - t
        if t == 0.0:
            return 1.0
        if t == 1.0:
            return 0.0
        sigma = self.sigma_min ** (1.0 - t) * self.sigma_max**t
        return math.exp(-sigma)

    def alpha_prime(self, t: float) -> float:
        """d alpha/dt from the unclamped analytic form."""
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"time {t} outside [0,1]")
        if self.kind == "linear":
            return -1.0
        sigma = self.sigma_min ** (1.0 - t) * self.sigma_max**t
        return -sigma * math.log(self.sigma_max / self.sigma_min) * math.exp(-sigma)


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    return schedule.alpha(t)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0,1] into T steps; t(i) = i/T."""

    T: int

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError(f"step count must be positive, got {self.T}")

    def time(self, i: int) -> float:
        return i / self.T


def mask_forward(
    x0: np.ndarray, t: float, schedule: NoiseSchedule, vocab: Vocabulary, rng: np.random.Generator
) -> MaskedSample:
    """Corrupt a clean sequence: each position keeps its token w.p. alpha(t)."""
    x0 = as_sequence(x0)
    vocab.validate_clean(x0)
    a = schedule.alpha(t)
    keep = rng.random(x0.size) < a
    out = np.where(keep, x0, vocab.mask_id)
    return MaskedSample(out, t)


def forward_logprob(
    xt: MaskedSample, x0: np.ndarray, schedule: NoiseSchedule, vocab: Vocabulary
) -> float:
    """log p(x_t | x_0) under the per-position masking kernel."""
    x0 = as_sequence(x0)
    vocab.validate_clean(x0)
    if xt.tokens.size != x0.size:
        raise InvalidInputError("length mismatch between x_t and x_0")
    a = schedule.alpha(xt.t)
    masked = xt.tokens == vocab.mask_id
    kept = xt.tokens == x0
    if not (masked | kept).all():
        return NEG_INF
    n_masked = int(masked.sum())
    n_kept = x0.size - n_masked
    log_a = math.log(a) if a > 0 else NEG_INF
    log_1a = math.log1p(-a) if a < 1 else NEG_INF
    if n_kept > 0 and a == 0.0:
        return NEG_INF
    if n_masked > 0 and a == 1.0:
        return NEG_INF
    return n_kept * (log_a if n_kept else 0.0) + n_masked * (log_1a if n_masked else 0.0)


def bridge_sample(
    x0: np.ndarray,
    xt: MaskedSample,
    s: float,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> MaskedSample:
    """Sample x_s from the forward law conditioned on endpoints (x_0, x_t).

    Positions unmasked in x_t stay equal to x_0; masked positions stay masked
    with probability (1-alpha_s)/(1-alpha_t), else revert to x_0.
    """
    x0 = as_sequence(x0)
    vocab.validate_clean(x0)
    if s > xt.t:
        raise DomainError(f"bridge time {s} exceeds endpoint time {xt.t}")
    if xt.tokens.size != x0.size:
        raise InvalidInputError("length mismatch between x_t and x_0")
    masked = xt.tokens == vocab.mask_id
    if not (masked | (xt.tokens == x0)).all():
        raise InvalidInputError("x_t disagrees with x_0 on an unmasked position")
    if s == xt.t:
        return MaskedSample(xt.tokens.copy(), s)
    a_s = schedule.alpha(s)
    a_t = schedule.alpha(xt.t)
    stay = (1.0 - a_s) / (1.0 - a_t) if a_t < 1.0 else 0.0
    out = x0.copy()
    if masked.any():
        stay_draw = rng.random(x0.size) < stay
        out[masked & stay_draw] = vocab.mask_id
    return MaskedSample(out, s)
