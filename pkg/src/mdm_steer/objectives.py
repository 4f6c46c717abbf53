"""Pretraining ELBO, log-partition estimators, posterior-prediction losses.

Loss operations are pure: they build a fresh graph, backpropagate, and return
``LossResult(value, grads, info)`` keyed by the trainable model's parameters.
Optimizer mutation belongs to the caller (see the train-step helpers), so a
training step is the only critical section.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, collect_grads, no_grad, zero_grads
from .core import (
    NEG_INF,
    DomainError,
    EmptyBufferError,
    EstimatorDegenerateError,
    InvalidInputError,
    InvalidSampleError,
    MaskedSample,
    NoiseSchedule,
    TimeGrid,
    TrainingError,
    Vocabulary,
    as_sequence,
    bridge_sample,
    is_neg_inf,
    mask_forward,
)
from .denoiser import (
    DenoiserOutput,
    OptimizerState,
    adam_step,
    endpoint_logprob,
    predict_mean,
    transition_logprob,
)

REWARD_FLOOR = -30.0


def logsumexp(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    m = values.max()
    if is_neg_inf(m) or m == -np.inf:
        return NEG_INF
    return float(m + math.log(np.exp(values - m).sum()))


@dataclass
class LossResult:
    """Scalar loss value, gradients for the trained parameters, diagnostics."""

    value: float
    grads: dict
    info: dict = field(default_factory=dict)


class RewardModel:
    """log R evaluation with temperature exponent and a finite floor.

    ``relaxed_fn`` (optional) evaluates log R on per-position simplex rows
    over the non-mask tokens and must agree with ``fn`` on exact one-hots.
    """

    def __init__(self, fn, relaxed_fn=None, beta_inv: float = 1.0, floor: float = REWARD_FLOOR):
        if beta_inv <= 0:
            raise InvalidInputError("temperature exponent must be positive")
        self._fn = fn
        self._relaxed_fn = relaxed_fn
        self.beta_inv = beta_inv
        self.floor = floor

    @property
    def has_relaxed(self) -> bool:
        return self._relaxed_fn is not None

    def log_reward(self, x0) -> float:
        raw = self.beta_inv * self._fn(as_sequence(x0))
        return max(float(raw), self.floor)

    def relaxed_log_reward(self, rows: list) -> Tensor:
        if self._relaxed_fn is None:
            raise InvalidInputError("reward model does not expose a relaxed variant")
        out = self._relaxed_fn(rows) * self.beta_inv
        return out.clamp_min(self.floor)

    def scaled(self, log_c: float) -> "RewardModel":
        """Reward multiplied by a constant c (log R shifted by log c)."""
        base_fn = self._fn
        beta = self.beta_inv
        scaled_fn = lambda x0: base_fn(x0) + log_c / beta
        relaxed = None
        if self._relaxed_fn is not None:
            base_rel = self._relaxed_fn
            relaxed = lambda rows: base_rel(rows) + log_c / beta
        return RewardModel(scaled_fn, relaxed, beta, self.floor)


@dataclass
class CallCounter:
    """Model/reward call accounting in the conceptual per-endpoint units used
    for cost comparisons: each endpoint sampled from or scored against a
    model counts once, no matter how evaluations are batched or reused.
    ``mark_step`` records the delta since the previous mark, giving exact
    per-step rows."""

    pre_calls: int = 0
    q_calls: int = 0
    reward_calls: int = 0
    steps: list = field(default_factory=list)
    _mark: tuple = (0, 0, 0)

    def add_pre(self, k: int = 1):
        self.pre_calls += k

    def add_q(self, k: int = 1):
        self.q_calls += k

    def add_reward(self, k: int = 1):
        self.reward_calls += k

    def reset(self):
        self.pre_calls = self.q_calls = self.reward_calls = 0
        self.steps = []
        self._mark = (0, 0, 0)

    def snapshot(self) -> tuple[int, int, int]:
        return (self.pre_calls, self.q_calls, self.reward_calls)

    def mark_step(self):
        cur = self.snapshot()
        self.steps.append(tuple(c - m for c, m in zip(cur, self._mark)))
        self._mark = cur


class ReplayBuffer:
    """Ring store of clean sequences with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise InvalidInputError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self._cursor = 0

    def __len__(self):
        return len(self._items)

    def push(self, sequences):
        for s in np.atleast_2d(np.asarray(sequences, dtype=np.int64)):
            if len(self._items) < self.capacity:
                self._items.append(s.copy())
            else:
                self._items[self._cursor] = s.copy()
                self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self._items:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(self._items), size=batch_size)
        return np.stack([self._items[i] for i in idx])


def buffer_push(buffer: ReplayBuffer, sequences):
    buffer.push(sequences)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return buffer.sample(batch_size, rng)


# -- discrete gradient estimators --------------------------------------------


class StraightThrough:
    """Forward: exact one-hot categorical sample; backward: identity to probs."""

    kind = "straight-through"

    def sample(self, probs: Tensor, rng: np.random.Generator) -> tuple[Tensor, int]:
        p = probs.data
        tok = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"),
                      p.size - 1))
        onehot = np.zeros_like(p)
        onehot[tok] = 1.0
        out = Tensor(onehot) + (probs - probs.detach())
        return out, tok


class Reinmax:
    """Second-order straight-through correction (two softmax passes)."""

    kind = "reinmax"

    def __init__(self, tau: float = 1.0):
        self.tau = tau

    def sample(self, probs: Tensor, rng: np.random.Generator) -> tuple[Tensor, int]:
        p = probs.data
        tok = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"),
                      p.size - 1))
        onehot = np.zeros_like(p)
        onehot[tok] = 1.0
        theta = probs.clamp_min(1e-300).log()
        pi0 = probs
        pi1 = (Tensor(onehot) + (theta * (1.0 / self.tau)).softmax()) * 0.5
        # value-preserving reroute: softmax(stopgrad(log pi1 - theta) + theta)
        shift = Tensor(np.log(np.maximum(pi1.data, 1e-300)) - theta.data)
        pi1 = (shift + theta).softmax()
        pi2 = pi1 * 2.0 - pi0 * 0.5
        out = Tensor(onehot) + (pi2 - pi2.detach())
        return out, tok


def make_estimator(kind: str):
    if kind == "straight-through":
        return StraightThrough()
    if kind == "reinmax":
        return Reinmax()
    raise InvalidInputError(f"unknown gradient estimator {kind!r}")


# -- logZ prediction head -----------------------------------------------------


class LogZHead:
    """Small MLP from pooled summary features of (x_t, t) to a scalar.

    Features: mask fraction, time, and the normalized histogram of observed
    (non-mask) tokens.
    """

    def __init__(self, vocab: Vocabulary, n: int, hidden: int = 32, seed: int = 0):
        self.vocab = vocab
        self.n = n
        self.hidden = hidden
        self.seed = seed
        rng = np.random.default_rng(seed)
        f = 2 + vocab.size - 1
        self.params: dict[str, Tensor] = {
            "w1": Tensor(rng.normal(0, 1 / math.sqrt(f), (f, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.normal(0, 1 / math.sqrt(hidden), (hidden, 1)), requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }

    def features(self, tokens: np.ndarray, ts: np.ndarray) -> np.ndarray:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, n = tokens.shape
        d1 = self.vocab.size - 1
        out = np.zeros((B, 2 + d1))
        mask = tokens == self.vocab.mask_id
        out[:, 0] = mask.mean(axis=1)
        out[:, 1] = np.asarray(ts)
        for b in range(B):
            obs = tokens[b][~mask[b]]
            if obs.size:
                hist = np.bincount(obs, minlength=d1).astype(np.float64)
                out[b, 2:] = hist / n
        return out

    def forward_batch(self, tokens: np.ndarray, ts: np.ndarray) -> Tensor:
        x = Tensor(self.features(tokens, ts))
        h = (x @ self.params["w1"] + self.params["b1"]).gelu()
        return (h @ self.params["w2"] + self.params["b2"]).reshape(-1)

    def forward(self, xt: MaskedSample) -> Tensor:
        return self.forward_batch(xt.tokens.reshape(1, -1), np.array([xt.t])).reshape(())

    def clone(self) -> "LogZHead":
        other = LogZHead(self.vocab, self.n, self.hidden, self.seed)
        for k, p in self.params.items():
            other.params[k].data = p.data.copy()
        return other


# -- ELBO ---------------------------------------------------------------------


def elbo_weight(schedule: NoiseSchedule, t: float) -> float:
    return -schedule.alpha_prime(t) / (1.0 - schedule.alpha(t))


def draw_elbo_time(schedule: NoiseSchedule, rng: np.random.Generator, retries: int = 100) -> float:
    """Uniform time, rejecting values where 1 - alpha(t) vanishes numerically."""
    for _ in range(retries):
        t = float(rng.random())
        if 1.0 - schedule.alpha(t) > 1e-12:
            return t
    raise TrainingError("could not draw a usable ELBO time (1 - alpha == 0 numerically)")


def elbo_term(model, x0: np.ndarray, xt: MaskedSample, schedule: NoiseSchedule) -> Tensor:
    """Single-sample negative-ELBO integrand at a fixed (x0, xt)."""
    out = predict_mean(model, xt)
    ll = endpoint_logprob(out, xt, x0, model.vocab)
    return -ll * elbo_weight(schedule, xt.t)


def elbo_loss(model, x0, schedule: NoiseSchedule, rng: np.random.Generator,
              counter: CallCounter | None = None) -> LossResult:
    """Unbiased single-sample negative-ELBO estimate with gradients."""
    x0 = as_sequence(x0)
    t = draw_elbo_time(schedule, rng)
    xt = mask_forward(x0, t, schedule, model.vocab, rng)
    zero_grads(model.params)
    loss = elbo_term(model, x0, xt, schedule)
    loss.backward()
    if counter is not None:
        counter.add_q(1)
    return LossResult(loss.item(), collect_grads(model.params),
                      {"t": t, "xt": xt, "n_masked": int((xt.tokens == model.vocab.mask_id).sum())})


# -- log-partition estimators ---------------------------------------------------


def endpoint_logprob_np(out: DenoiserOutput, x0s: np.ndarray) -> np.ndarray:
    """Vectorized log p(x0 | xt) for a batch of endpoints (graph-free)."""
    x0s = np.atleast_2d(x0s)
    masked = np.nonzero(out.mask_flags)[0]
    res = np.zeros(x0s.shape[0])
    if masked.size:
        logs = np.log(np.maximum(out.mu[masked], 1e-300))
        res += logs[np.arange(masked.size)[None, :], x0s[:, masked]].sum(axis=1)
    unmasked = ~out.mask_flags
    bad = (x0s[:, unmasked] != out.tokens[unmasked]).any(axis=1)
    res[bad] = NEG_INF
    return res


def draw_endpoints(out: DenoiserOutput, M: int, rng: np.random.Generator) -> np.ndarray:
    """M factorized endpoint draws from a denoising posterior."""
    n = out.tokens.size
    x0s = np.tile(out.tokens, (M, 1))
    masked = np.nonzero(out.mask_flags)[0]
    if masked.size:
        cdf = np.cumsum(out.mu[masked], axis=1)
        u = rng.random((M, masked.size))
        draws = (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
        x0s[:, masked] = np.minimum(draws, out.mu.shape[1] - 1)
    return x0s


def logZ_mc(pre_model, xt: MaskedSample, M: int, reward: RewardModel,
            rng: np.random.Generator, counter: CallCounter | None = None) -> float:
    """Monte Carlo log-partition estimate from M pretrained endpoint draws."""
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    with no_grad():
        out = predict_mean(pre_model, xt)
    x0s = draw_endpoints(out, M, rng)
    log_rs = np.array([reward.log_reward(x) for x in x0s])
    if counter is not None:
        counter.add_pre(M)
        counter.add_reward(M)
    return logsumexp(log_rs) - math.log(M)


def logZ_is(pre_model, proposal_model, xt: MaskedSample, M: int, reward: RewardModel,
            rng: np.random.Generator, counter: CallCounter | None = None) -> float:
    """Importance-sampled log-partition estimate with a model proposal."""
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    with no_grad():
        out_prop = predict_mean(proposal_model, xt)
        out_pre = predict_mean(pre_model, xt)
    x0s = draw_endpoints(out_prop, M, rng)
    log_rs = np.array([reward.log_reward(x) for x in x0s])
    logw = endpoint_logprob_np(out_pre, x0s) + log_rs - endpoint_logprob_np(out_prop, x0s)
    if counter is not None:
        counter.add_pre(M)
        counter.add_q(M)
        counter.add_reward(M)
    if all(is_neg_inf(v) for v in logw):
        raise EstimatorDegenerateError("all importance weights are -inf")
    return logsumexp(logw) - math.log(M)


def lemma1_optimal_logZ(q_model, pre_model, reward: RewardModel, xt: MaskedSample,
                        endpoints) -> float:
    """Batch mean of log(p_pre * R / q): the argmin-in-C of the squared loss."""
    endpoints = [as_sequence(e) for e in endpoints]
    if not endpoints:
        raise InvalidInputError("lemma1 estimate needs at least one endpoint")
    with no_grad():
        out_q = predict_mean(q_model, xt)
        out_pre = predict_mean(pre_model, xt)
    terms = []
    for x0 in endpoints:
        lp_pre = endpoint_logprob(out_pre, xt, x0, pre_model.vocab).item()
        lp_q = endpoint_logprob(out_q, xt, x0, q_model.vocab).item()
        if is_neg_inf(lp_pre) or is_neg_inf(lp_q):
            raise InvalidSampleError("endpoint outside a posterior's support")
        terms.append(lp_pre + reward.log_reward(x0) - lp_q)
    return float(np.mean(terms))


# -- posterior-prediction losses -------------------------------------------------


def single_step_residual(q_model, pre_model, reward: RewardModel, x0: np.ndarray,
                         xt: MaskedSample, logz_value: float) -> Tensor:
    """Graph-carrying residual of the squared posterior-prediction loss."""
    x0 = as_sequence(x0)
    out_q = predict_mean(q_model, xt)
    with no_grad():
        out_pre = predict_mean(pre_model, xt)
    lp_q = endpoint_logprob(out_q, xt, x0, q_model.vocab)
    lp_pre = endpoint_logprob(out_pre, xt, x0, pre_model.vocab).item()
    if is_neg_inf(lp_q.item()) or is_neg_inf(lp_pre):
        raise InvalidSampleError("x0 disagrees with xt on an observed position")
    return lp_q - lp_pre - reward.log_reward(x0) + float(logz_value)


def ddpp_single_step_loss(q_model, pre_model, reward: RewardModel, x0, xt: MaskedSample,
                          logz_value: float, counter: CallCounter | None = None) -> LossResult:
    """Squared single-step posterior residual; gradients into q_model only."""
    zero_grads(q_model.params)
    r = single_step_residual(q_model, pre_model, reward, x0, xt, logz_value)
    loss = r * r
    loss.backward()
    if counter is not None:
        counter.add_q(1)
        counter.add_pre(1)
        counter.add_reward(1)
    return LossResult(loss.item(), collect_grads(q_model.params), {"residual": r.item()})


def _batched_masked_ll(model, xt_tokens: np.ndarray, ts: np.ndarray, x0_tokens: np.ndarray,
                       grad: bool) -> Tensor:
    """Sum of log mu over masked positions, per batch element: (B,) tensor."""
    B, n = xt_tokens.shape
    mask_flat = (xt_tokens == model.vocab.mask_id).reshape(-1)
    if grad:
        logits = model.forward_tokens(xt_tokens, ts)
    else:
        with no_grad():
            logits = model.forward_tokens(xt_tokens, ts)
    logsm = logits.log_softmax()
    vals = logsm.gather(np.arange(B * n), x0_tokens.reshape(-1))
    return (vals * Tensor(mask_flat.astype(np.float64))).reshape(B, n).sum(axis=1)


@dataclass
class LbStepMetrics:
    loss: float
    logz_mean: float
    residual_rms: float


def ddpp_lb_train_step(q_model, head: LogZHead, pre_model, reward: RewardModel,
                       batch: list, warmup: bool,
                       opt_q: OptimizerState, opt_head: OptimizerState,
                       counter: CallCounter | None = None) -> LbStepMetrics:
    """One joint (or warmup head-only) update on a batch of (x0, xt) pairs.

    Exactly one pretrained and one fine-tuned evaluation per batch element.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    x0_tokens = np.stack([as_sequence(x0) for x0, _ in batch])
    xt_tokens = np.stack([xt.tokens for _, xt in batch])
    ts = np.array([xt.t for _, xt in batch])
    B = len(batch)
    if ((xt_tokens != q_model.vocab.mask_id) & (xt_tokens != x0_tokens)).any():
        raise InvalidSampleError("a batch element's x0 disagrees with its xt")
    q_ll = _batched_masked_ll(q_model, xt_tokens, ts, x0_tokens, grad=not warmup)
    if warmup:
        q_ll = q_ll.detach()
    pre_ll = _batched_masked_ll(pre_model, xt_tokens, ts, x0_tokens, grad=False).detach()
    log_r = Tensor(np.array([reward.log_reward(x) for x in x0_tokens]))
    z = head.forward_batch(xt_tokens, ts)
    resid = q_ll - pre_ll - log_r + z
    loss = (resid * resid).mean()
    zero_grads(q_model.params)
    zero_grads(head.params)
    loss.backward()
    if counter is not None:
        counter.add_pre(B)
        counter.add_q(B)
        counter.add_reward(B)
    adam_step(head.params, collect_grads(head.params), opt_head)
    if not warmup:
        adam_step(q_model.params, collect_grads(q_model.params), opt_q)
    return LbStepMetrics(loss.item(), float(z.data.mean()),
                         float(np.sqrt((resid.data**2).mean())))


def ddpp_is_train_step(q_model, pre_model, reward: RewardModel, batch: list, M: int,
                       opt_q: OptimizerState, rng: np.random.Generator,
                       counter: CallCounter | None = None) -> dict:
    """One update using per-element importance-sampled log-partition values.

    The current fine-tuned model serves as the proposal; a degenerate weight
    set falls back to the plain Monte Carlo estimate.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    logzs, fallbacks = [], 0
    for x0, xt in batch:
        try:
            logzs.append(logZ_is(pre_model, q_model, xt, M, reward, rng, counter))
        except EstimatorDegenerateError:
            fallbacks += 1
            logzs.append(logZ_mc(pre_model, xt, M, reward, rng, counter))
    x0_tokens = np.stack([as_sequence(x0) for x0, _ in batch])
    xt_tokens = np.stack([xt.tokens for _, xt in batch])
    ts = np.array([xt.t for _, xt in batch])
    q_ll = _batched_masked_ll(q_model, xt_tokens, ts, x0_tokens, grad=True)
    pre_ll = _batched_masked_ll(pre_model, xt_tokens, ts, x0_tokens, grad=False).detach()
    log_r = Tensor(np.array([reward.log_reward(x) for x in x0_tokens]))
    resid = q_ll - pre_ll - log_r + Tensor(np.array(logzs))
    loss = (resid * resid).mean()
    zero_grads(q_model.params)
    loss.backward()
    if counter is not None:
        counter.add_reward(len(batch))
    adam_step(q_model.params, collect_grads(q_model.params), opt_q)
    return {"loss": loss.item(), "logz_mean": float(np.mean(logzs)), "fallbacks": fallbacks}


# -- reverse-KL objective --------------------------------------------------------


@dataclass
class RelaxedSequence:
    """Clean tokens plus per-position simplex rows (graph-carrying where drawn)."""

    tokens: np.ndarray
    rows: list


def onpolicy_relaxed_sample(q_model, n: int, grid: TimeGrid, schedule: NoiseSchedule,
                            rng: np.random.Generator, estimator,
                            counter: CallCounter | None = None) -> RelaxedSequence:
    """Ancestral draw from q with the final unmask routed through the estimator."""
    vocab = q_model.vocab
    d1 = vocab.size - 1
    tokens = np.full(n, vocab.mask_id, dtype=np.int64)
    rows: list = [None] * n
    for i in range(grid.T, 0, -1):
        t_cur, t_to = grid.time(i), grid.time(i - 1)
        mask_flags = tokens == vocab.mask_id
        last_step = i == 1
        if last_step:
            out = predict_mean(q_model, MaskedSample(tokens, t_cur))
        else:
            with no_grad():
                out = predict_mean(q_model, MaskedSample(tokens, t_cur))
        if counter is not None:
            counter.add_q(1)
        if not mask_flags.any():
            continue
        if last_step:
            # final transition plus forcing: every survivor resolves via mu
            for pos in np.nonzero(mask_flags)[0]:
                row_t = out.rows.take_rows(np.array([pos])).reshape(-1)
                relaxed, tok = estimator.sample(row_t, rng)
                tokens[pos] = tok
                rows[pos] = relaxed
            continue
        stay = (1.0 - schedule.alpha(t_to)) / (1.0 - schedule.alpha(t_cur))
        u_stay = rng.random(n)
        u_tok = rng.random(n)
        for pos in range(n):
            if not mask_flags[pos] or u_stay[pos] < stay:
                continue
            cdf = np.cumsum(out.mu[pos])
            tokens[pos] = min(np.searchsorted(cdf, u_tok[pos], side="right"), d1 - 1)
    for pos in range(n):
        if rows[pos] is None:
            onehot = np.zeros(d1)
            onehot[tokens[pos]] = 1.0
            rows[pos] = Tensor(onehot)
    return RelaxedSequence(tokens, rows)


def ddpp_kl_loss(q_model, pre_model, reward: RewardModel, K: int, estimator,
                 schedule: NoiseSchedule, grid: TimeGrid, rng: np.random.Generator,
                 counter: CallCounter | None = None) -> LossResult:
    """Reverse-KL surrogate: on-policy sample, K reparametrized endpoint draws.

    The log-partition constant is dropped (no gradient); the reward must be
    differentiable through its relaxed form.
    """
    if not reward.has_relaxed:
        raise InvalidInputError("reverse-KL objective requires a relaxed reward")
    vocab = q_model.vocab
    n = q_model.n
    zero_grads(q_model.params)
    x0 = onpolicy_relaxed_sample(q_model, n, grid, schedule, rng, estimator)
    t = float(rng.random())
    keep = rng.random(n) < schedule.alpha(t)
    mask_flags = ~keep
    xt_tokens = np.where(keep, x0.tokens, vocab.mask_id)
    xt_rows = [x0.rows[i] if keep[i] else None for i in range(n)]
    q_logits = q_model.forward_rows(xt_rows, mask_flags, t)
    pre_logits = pre_model.forward_rows(xt_rows, mask_flags, t)
    q_rows = q_logits.softmax()
    pre_rows = pre_logits.softmax()
    masked_idx = np.nonzero(mask_flags)[0]
    if counter is not None:
        counter.add_pre(1)
        counter.add_q(1)
        counter.add_reward(K)
    terms = []
    for _ in range(K):
        hat_rows = list(x0.rows)
        lp_q = Tensor(0.0)
        lp_pre = Tensor(0.0)
        for pos in masked_idx:
            row_t = q_rows.take_rows(np.array([pos])).reshape(-1)
            relaxed, _tok = estimator.sample(row_t, rng)
            hat_rows[pos] = relaxed
            pre_row = pre_rows.take_rows(np.array([pos])).reshape(-1)
            # dot with the exact-one-hot surrogate picks the sampled entry
            lp_q = lp_q + (row_t * relaxed).sum().clamp_min(1e-300).log()
            lp_pre = lp_pre + (pre_row * relaxed).sum().clamp_min(1e-300).log()
        log_r = reward.relaxed_log_reward(hat_rows)
        terms.append(lp_q - lp_pre - log_r)
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    loss = loss * (1.0 / K)
    loss.backward()
    grads = collect_grads(q_model.params)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite surrogate gradient in {name!r}")
    return LossResult(loss.item(), grads,
                      {"t": t, "n_masked": int(mask_flags.sum()), "x0": x0.tokens})


# -- sub-trajectory objective ------------------------------------------------------


def subtrajectory_residual(q_model, pre_model, reward: RewardModel, x0: np.ndarray,
                           xt: MaskedSample, gamma: float, logz_value: float,
                           schedule: NoiseSchedule, rng: np.random.Generator,
                           n_inner: int = 1, counter: CallCounter | None = None) -> Tensor:
    """Step-count-scaled average transition log-ratio plus the constant kappa.

    The inner expectation over (s, x_s, x_{s-gamma}) is estimated with
    ``n_inner`` draws inside the square, matching the nesting of the
    sub-trajectory objective; a single draw is the cheap default. The
    multiplier t/gamma is the number of width-gamma steps covering [0, t].
    """
    x0 = as_sequence(x0)
    if not 0.0 < gamma <= xt.t:
        raise DomainError(f"gamma must satisfy 0 < gamma <= t, got {gamma} vs t={xt.t}")
    vocab = q_model.vocab
    delta = Tensor(0.0)
    for _ in range(n_inner):
        s = gamma + (xt.t - gamma) * float(rng.random())
        x_s = bridge_sample(x0, xt, s, schedule, vocab, rng)
        x_sg = bridge_sample(x0, x_s, s - gamma, schedule, vocab, rng)
        out_q = predict_mean(q_model, x_s)
        with no_grad():
            out_pre = predict_mean(pre_model, x_s)
        lp_q = transition_logprob(out_q, x_s, x_sg.tokens, s - gamma, schedule, vocab)
        lp_pre = transition_logprob(out_pre, x_s, x_sg.tokens, s - gamma, schedule, vocab).item()
        if is_neg_inf(lp_q.item()) or is_neg_inf(lp_pre):
            raise InvalidSampleError("bridge transition outside the reverse kernel's support")
        if counter is not None:
            counter.add_q(1)
            counter.add_pre(1)
        delta = delta + (lp_q - lp_pre)
    if counter is not None:
        counter.add_reward(1)
    kappa = float(logz_value) - reward.log_reward(x0)
    return delta * (xt.t / gamma / n_inner) + kappa


def ddpp_subtrajectory_loss(q_model, pre_model, reward: RewardModel, x0, xt: MaskedSample,
                            gamma: float, logz_value: float, schedule: NoiseSchedule,
                            rng: np.random.Generator, n_inner: int = 1,
                            counter: CallCounter | None = None) -> LossResult:
    """Squared sub-trajectory residual; gradients into q_model."""
    zero_grads(q_model.params)
    r = subtrajectory_residual(q_model, pre_model, reward, x0, xt, gamma, logz_value,
                               schedule, rng, n_inner, counter)
    loss = r * r
    loss.backward()
    return LossResult(loss.item(), collect_grads(q_model.params), {"residual": r.item()})
