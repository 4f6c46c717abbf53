"""Exact brute-force references on enumerable instances.

Everything here trades exponential cost for exactness: endpoint likelihoods
by dynamic programming over mask patterns, reward-tilted targets by direct
summation, and divergences on aligned supports. The sampler's finite-step
conventions (including the forced final unmask) are reproduced literally so
oracle and sampler describe the same process.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autograd import no_grad
from .core import (
    MaskedSample,
    NoiseSchedule,
    SizeError,
    TimeGrid,
    Vocabulary,
    as_sequence,
)
from .denoiser import endpoint_logprob, predict_mean

ENUM_BUDGET = 10**6


@dataclass
class DistTable:
    """Explicit distribution over clean sequences."""

    support: list
    probs: np.ndarray

    def __post_init__(self):
        self.support = [as_sequence(s) for s in self.support]
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.support) != self.probs.size:
            raise ValueError("support/probs size mismatch")
        keys = {tuple(s.tolist()) for s in self.support}
        if len(keys) != len(self.support):
            raise ValueError("duplicate sequences in support")
        if abs(self.probs.sum() - 1.0) > 1e-10 or (self.probs < 0).any():
            raise ValueError("probabilities must be nonnegative and sum to 1")

    def as_dict(self) -> dict:
        return {tuple(s.tolist()): p for s, p in zip(self.support, self.probs)}

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s, p in zip(self.support, self.probs):
                fh.write("-".join(str(v) for v in s.tolist()) + f",{p!r}\n")

    @staticmethod
    def from_csv(path) -> "DistTable":
        support, probs = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                seq, p = line.strip().split(",")
                support.append([int(v) for v in seq.split("-")])
                probs.append(float(p))
        return DistTable(support, np.array(probs))


def enumerate_sequences(d: int, n: int) -> list[np.ndarray]:
    """All clean sequences over a d-token vocabulary, lexicographic order."""
    count = (d - 1) ** n
    if count > ENUM_BUDGET:
        raise SizeError(f"{count} clean sequences exceed the enumeration budget")
    return [as_sequence(c) for c in itertools.product(range(d - 1), repeat=n)]


def exact_mdm_likelihood(model, x0, grid: TimeGrid, schedule: NoiseSchedule) -> float:
    """Exact log-probability that T-step ancestral sampling emits ``x0``.

    Dynamic program over mask patterns: a state is the set of still-masked
    positions (unmasked ones must already agree with x0). Includes the forced
    final unmask applied when masks survive to t=0.
    """
    x0 = as_sequence(x0)
    vocab = model.vocab
    vocab.validate_clean(x0)
    n = x0.size
    if (2**n) * grid.T > ENUM_BUDGET:
        raise SizeError("mask-pattern DP exceeds the enumeration budget")

    def tokens_of(pattern: int) -> np.ndarray:
        toks = x0.copy()
        for i in range(n):
            if pattern >> i & 1:
                toks[i] = vocab.mask_id
        return toks

    full = (1 << n) - 1
    dist = {full: 1.0}
    for i in range(grid.T, 0, -1):
        t_cur, t_to = grid.time(i), grid.time(i - 1)
        a_cur, a_to = schedule.alpha(t_cur), schedule.alpha(t_to)
        stay = (1.0 - a_to) / (1.0 - a_cur)
        unmask_scale = (a_to - a_cur) / (1.0 - a_cur)
        nxt: dict[int, float] = {}
        for pattern, prob in dist.items():
            if prob == 0.0:
                continue
            with no_grad():
                out = predict_mean(model, MaskedSample(tokens_of(pattern), t_cur))
            masked_positions = [k for k in range(n) if pattern >> k & 1]
            if i == 1:
                # last step: staying masked leads to the forced unmask from the
                # same mu, so each position resolves to mu[pos] unconditionally
                p_step = prob
                for pos in masked_positions:
                    p_step *= out.mu[pos, x0[pos]]
                nxt[0] = nxt.get(0, 0.0) + p_step
                continue
            # enumerate which masked positions unmask this step
            for keep_subset in range(1 << len(masked_positions)):
                p_step = prob
                new_pattern = pattern
                for j, pos in enumerate(masked_positions):
                    if keep_subset >> j & 1:
                        p_step *= stay
                    else:
                        p_step *= unmask_scale * out.mu[pos, x0[pos]]
                        new_pattern &= ~(1 << pos)
                if p_step > 0.0:
                    nxt[new_pattern] = nxt.get(new_pattern, 0.0) + p_step
        dist = nxt
    total = dist.get(0, 0.0)
    return math.log(total) if total > 0 else -math.inf


def endpoint_law(model, n: int, grid: TimeGrid, schedule: NoiseSchedule) -> DistTable:
    """Exact ancestral endpoint distribution over all clean sequences."""
    support = enumerate_sequences(model.vocab.size, n)
    probs = np.array([math.exp(exact_mdm_likelihood(model, s, grid, schedule)) for s in support])
    return DistTable(support, probs / probs.sum())


def exact_target(pre_table: DistTable, reward) -> DistTable:
    """Reward-tilted distribution: probs proportional to prior times reward."""
    weights = np.array(
        [p * math.exp(reward.log_reward(s)) for s, p in zip(pre_table.support, pre_table.probs)]
    )
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("degenerate target: all prior-times-reward products are zero")
    return DistTable(pre_table.support, weights / total)


def exact_denoising_posterior(pre_model, xt: MaskedSample, reward) -> tuple[DistTable, float]:
    """Enumerate the reward-tilted endpoint posterior given xt; return (table, logZ)."""
    vocab = pre_model.vocab
    n = xt.tokens.size
    masked = np.nonzero(xt.tokens == vocab.mask_id)[0]
    count = (vocab.size - 1) ** masked.size
    if count > ENUM_BUDGET:
        raise SizeError(f"{count} reachable endpoints exceed the enumeration budget")
    with no_grad():
        out = predict_mean(pre_model, xt)
    support, logw = [], []
    for combo in itertools.product(range(vocab.size - 1), repeat=masked.size):
        x0 = xt.tokens.copy()
        x0[masked] = combo
        lp = endpoint_logprob(out, xt, x0, vocab).item()
        support.append(x0)
        logw.append(lp + reward.log_reward(x0))
    logw = np.array(logw)
    m = logw.max()
    w = np.exp(logw - m)
    log_z = m + math.log(w.sum())
    return DistTable(support, w / w.sum()), log_z


def _aligned(p: DistTable, q: DistTable) -> tuple[np.ndarray, np.ndarray]:
    keys = sorted({tuple(s.tolist()) for s in p.support} | {tuple(s.tolist()) for s in q.support})
    pd, qd = p.as_dict(), q.as_dict()
    return (
        np.array([pd.get(k, 0.0) for k in keys]),
        np.array([qd.get(k, 0.0) for k in keys]),
    )


def tv_distance(p: DistTable, q: DistTable) -> float:
    pv, qv = _aligned(p, q)
    return 0.5 * np.abs(pv - qv).sum()


def kl_divergence(p: DistTable, q: DistTable) -> float:
    pv, qv = _aligned(p, q)
    if ((pv > 0) & (qv == 0)).any():
        raise ValueError("KL support violation: q assigns zero mass where p > 0")
    nz = pv > 0
    return float((pv[nz] * np.log(pv[nz] / qv[nz])).sum())


def empirical_histogram(samples, binning=None) -> DistTable:
    """Normalized counts of observed sequences, optionally coarse-grained.

    ``binning`` maps a sequence to its bin key (another id tuple); the default
    is the identity.
    """
    if len(samples) == 0:
        raise ValueError("empirical_histogram requires at least one sample")
    counts: dict[tuple, int] = {}
    for s in samples:
        s = as_sequence(s)
        key = tuple(binning(s)) if binning is not None else tuple(s.tolist())
        counts[key] = counts.get(key, 0) + 1
    keys = sorted(counts)
    total = sum(counts.values())
    return DistTable([np.array(k) for k in keys], np.array([counts[k] / total for k in keys]))
