"""Mean-parametrized denoisers, reverse-process posteriors and ancestral sampling.

Two reference architectures share one contract: given a partially masked
sequence and its time, produce per-position probability rows over the
non-mask tokens. Rows at observed positions are overwritten with the
observed one-hot (copy-through), so training never sees gradients there.

Training utilities (Adam with bias correction, EMA shadow weights, central
finite-difference gradient verification) live here as well; they operate on
plain ``{name: Tensor}`` parameter dicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, concat, no_grad, stack_rows
from .core import (
    NEG_INF,
    DomainError,
    InvalidInputError,
    MaskedSample,
    NoiseSchedule,
    TimeGrid,
    TrainingError,
    Vocabulary,
    as_sequence,
)


@dataclass
class DenoiserOutput:
    """Per-position categorical over the d-1 non-mask tokens.

    ``rows`` / ``log_rows`` carry the autograd graph when the producing model
    has trainable parameters; ``mu`` is the plain array view.
    """

    rows: Tensor
    log_rows: Tensor
    tokens: np.ndarray
    mask_flags: np.ndarray
    t: float

    @property
    def mu(self) -> np.ndarray:
        return self.rows.data


def time_features(ts: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of times in [0,1]; ``dim`` must be even."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1, 1)
    k = np.arange(dim // 2, dtype=np.float64)
    ang = ts * (2.0**k) * math.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MlpDenoiser:
    """Two-hidden-layer GELU MLP conditioning on the whole sequence.

    Token embeddings for all positions are concatenated with sinusoidal time
    features; the output layer emits all positions' logits from one shared
    weight matrix (each position's head is a slice of it).
    """

    variant = "mlp"

    def __init__(
        self,
        vocab: Vocabulary,
        n: int,
        embed_dim: int = 64,
        hidden_dim: int = 256,
        time_dim: int = 8,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.n = n
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.time_dim = time_dim
        self.seed = seed
        d = vocab.size
        rng = np.random.default_rng(seed)
        in_dim = n * embed_dim + time_dim

        def init(fan_in, *shape):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "embed": init(embed_dim, d, embed_dim),
            "w1": init(in_dim, in_dim, hidden_dim),
            "b1": Tensor(np.zeros(hidden_dim), requires_grad=True),
            "w2": init(hidden_dim, hidden_dim, hidden_dim),
            "b2": Tensor(np.zeros(hidden_dim), requires_grad=True),
            "wo": init(hidden_dim, hidden_dim, n * (d - 1)),
            "bo": Tensor(np.zeros(n * (d - 1)), requires_grad=True),
        }

    def arch_descriptor(self) -> dict:
        return {
            "variant": "mlp",
            "vocab_size": self.vocab.size,
            "n": self.n,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "time_dim": self.time_dim,
            "seed": self.seed,
        }

    def forward_tokens(self, tokens: np.ndarray, ts: np.ndarray) -> Tensor:
        """Raw logits for a batch: (B, n) tokens -> (B*n, d-1)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B = tokens.shape[0]
        emb = self.params["embed"].take_rows(tokens.reshape(-1))
        h = concat([emb.reshape(B, self.n * self.embed_dim), Tensor(time_features(ts, self.time_dim))], axis=1)
        h = (h @ self.params["w1"] + self.params["b1"]).gelu()
        h = (h @ self.params["w2"] + self.params["b2"]).gelu()
        logits = h @ self.params["wo"] + self.params["bo"]
        return logits.reshape(B * self.n, self.vocab.size - 1)

    def forward_rows(self, rows: list, mask_flags: np.ndarray, t: float) -> Tensor:
        """Raw logits for one relaxed sequence (list of (d-1,) simplex tensors)."""
        d = self.vocab.size
        e_clean = self.params["embed"].take_rows(np.arange(d - 1))
        embs = []
        for i in range(self.n):
            if mask_flags[i]:
                embs.append(self.params["embed"].take_rows(np.array([self.vocab.mask_id])))
            else:
                embs.append(rows[i].reshape(1, d - 1) @ e_clean)
        h = concat(embs + [Tensor(time_features(np.array([t]), self.time_dim))], axis=1)
        h = (h @ self.params["w1"] + self.params["b1"]).gelu()
        h = (h @ self.params["w2"] + self.params["b2"]).gelu()
        logits = h @ self.params["wo"] + self.params["bo"]
        return logits.reshape(self.n, d - 1)

    def clone(self) -> "MlpDenoiser":
        other = MlpDenoiser(
            self.vocab, self.n, self.embed_dim, self.hidden_dim, self.time_dim, self.seed
        )
        for k, p in self.params.items():
            other.params[k].data = p.data.copy()
        return other

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        return self


class TabularDenoiser:
    """Logit table indexed by (position, input token, time bucket).

    Each position's output depends only on its own input token (the mask
    pattern enters as that token being the mask id) and a coarse time bucket;
    exact enumeration over such models stays cheap.
    """

    variant = "tabular"

    def __init__(self, vocab: Vocabulary, n: int, n_buckets: int = 4, seed: int = 0):
        self.vocab = vocab
        self.n = n
        self.n_buckets = n_buckets
        self.seed = seed
        d = vocab.size
        self.params: dict[str, Tensor] = {
            "table": Tensor(np.zeros((n * d * n_buckets, d - 1)), requires_grad=True)
        }

    def arch_descriptor(self) -> dict:
        return {
            "variant": "tabular",
            "vocab_size": self.vocab.size,
            "n": self.n,
            "n_buckets": self.n_buckets,
            "seed": self.seed,
        }

    def bucket(self, t: float) -> int:
        return min(int(t * self.n_buckets), self.n_buckets - 1)

    def _flat_index(self, pos: np.ndarray, tok: np.ndarray, bucket: np.ndarray) -> np.ndarray:
        d = self.vocab.size
        return (pos * d + tok) * self.n_buckets + bucket

    def forward_tokens(self, tokens: np.ndarray, ts: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        B = tokens.shape[0]
        buckets = np.minimum((np.asarray(ts) * self.n_buckets).astype(np.int64), self.n_buckets - 1)
        pos = np.tile(np.arange(self.n), B)
        idx = self._flat_index(pos, tokens.reshape(-1), np.repeat(buckets, self.n))
        return self.params["table"].take_rows(idx)

    def forward_rows(self, rows: list, mask_flags: np.ndarray, t: float) -> Tensor:
        d = self.vocab.size
        b = self.bucket(t)
        out = []
        for i in range(self.n):
            if mask_flags[i]:
                idx = self._flat_index(np.array([i]), np.array([self.vocab.mask_id]), np.array([b]))
                out.append(self.params["table"].take_rows(idx))
            else:
                idx = self._flat_index(
                    np.full(d - 1, i), np.arange(d - 1), np.full(d - 1, b)
                )
                slab = self.params["table"].take_rows(idx)
                out.append(rows[i].reshape(1, d - 1) @ slab)
        return concat(out, axis=0)

    def set_rows(self, pos: int, tok: int, probs_by_bucket: np.ndarray):
        """Install log-probabilities directly (oracle-initialized models)."""
        probs_by_bucket = np.atleast_2d(probs_by_bucket)
        for b in range(self.n_buckets):
            row = probs_by_bucket[min(b, probs_by_bucket.shape[0] - 1)]
            idx = self._flat_index(np.array([pos]), np.array([tok]), np.array([b]))[0]
            self.params["table"].data[idx] = np.log(np.maximum(row, 1e-300))

    def clone(self) -> "TabularDenoiser":
        other = TabularDenoiser(self.vocab, self.n, self.n_buckets, self.seed)
        other.params["table"].data = self.params["table"].data.copy()
        return other

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        return self


def make_denoiser(variant: str, vocab: Vocabulary, n: int, seed: int = 0, **hp):
    if variant == "mlp":
        return MlpDenoiser(vocab, n, seed=seed, **hp)
    if variant == "tabular":
        return TabularDenoiser(vocab, n, seed=seed, **hp)
    raise InvalidInputError(f"unknown denoiser variant {variant!r}")


def _package(logits: Tensor, tokens: np.ndarray, vocab: Vocabulary, t: float) -> DenoiserOutput:
    """Apply copy-through post-softmax and bundle probability/log rows."""
    n = tokens.size
    d1 = vocab.size - 1
    mask_flags = tokens == vocab.mask_id
    mcol = Tensor(mask_flags.astype(np.float64).reshape(n, 1))
    inv = Tensor((~mask_flags).astype(np.float64).reshape(n, 1))
    onehot = np.zeros((n, d1))
    log_onehot = np.full((n, d1), NEG_INF)
    for i in range(n):
        if not mask_flags[i]:
            onehot[i, tokens[i]] = 1.0
            log_onehot[i, tokens[i]] = 0.0
    logsm = logits.log_softmax()
    rows = logsm.exp() * mcol + Tensor(onehot) * inv
    log_rows = logsm * mcol + Tensor(log_onehot) * inv
    return DenoiserOutput(rows=rows, log_rows=log_rows, tokens=tokens, mask_flags=mask_flags, t=t)


def predict_mean(model, xt: MaskedSample) -> DenoiserOutput:
    """Evaluate the denoiser on one masked sample."""
    tokens = as_sequence(xt.tokens)
    if tokens.size != model.n:
        raise InvalidInputError(f"sequence length {tokens.size} != model length {model.n}")
    model.vocab.validate_tokens(tokens)
    logits = model.forward_tokens(tokens.reshape(1, -1), np.array([xt.t]))
    return _package(logits, tokens, model.vocab, xt.t)


def reverse_transition_dist(
    mu: DenoiserOutput, xt: MaskedSample, t_to: float, schedule: NoiseSchedule
) -> np.ndarray:
    """Per-position categorical over all d tokens for the step xt.t -> t_to.

    Unmasked positions keep their token; masked positions stay masked with
    probability (1-alpha_to)/(1-alpha_t) and otherwise unmask following mu.
    """
    if t_to >= xt.t:
        raise DomainError(f"target time {t_to} must precede sample time {xt.t}")
    a_to = schedule.alpha(t_to)
    a_t = schedule.alpha(xt.t)
    n = xt.tokens.size
    d = mu.mu.shape[1] + 1
    out = np.zeros((n, d))
    stay = (1.0 - a_to) / (1.0 - a_t)
    for i in range(n):
        if mu.mask_flags[i]:
            out[i, : d - 1] = (a_to - a_t) / (1.0 - a_t) * mu.mu[i]
            out[i, d - 1] = stay
        else:
            out[i, xt.tokens[i]] = 1.0
    return out


def transition_logprob(
    mu: DenoiserOutput, xt: MaskedSample, next_tokens: np.ndarray, t_to: float,
    schedule: NoiseSchedule, vocab: Vocabulary,
) -> Tensor:
    """log q(x_next | x_t) under the reverse kernel; graph flows through mu.

    Returns a NEG_INF-valued constant tensor for transitions outside the
    kernel's support (re-masking or mutating an observed token).
    """
    if t_to >= xt.t:
        raise DomainError(f"target time {t_to} must precede sample time {xt.t}")
    next_tokens = as_sequence(next_tokens)
    a_to = schedule.alpha(t_to)
    a_t = schedule.alpha(xt.t)
    stay = (1.0 - a_to) / (1.0 - a_t)
    unmask_scale = (a_to - a_t) / (1.0 - a_t)
    const = 0.0
    rows, cols = [], []
    for i in range(xt.tokens.size):
        if not mu.mask_flags[i]:
            if next_tokens[i] != xt.tokens[i]:
                return Tensor(NEG_INF)
            continue
        if next_tokens[i] == vocab.mask_id:
            if stay <= 0.0:
                return Tensor(NEG_INF)
            const += math.log(stay)
        else:
            if unmask_scale <= 0.0:
                return Tensor(NEG_INF)
            const += math.log(unmask_scale)
            rows.append(i)
            cols.append(next_tokens[i])
    if not rows:
        return Tensor(const)
    return mu.log_rows.gather(np.array(rows), np.array(cols)).sum() + const


def endpoint_logprob(mu: DenoiserOutput, xt: MaskedSample, x0: np.ndarray, vocab: Vocabulary) -> Tensor:
    """Sum of log mu over positions masked in xt; NEG_INF on disagreement."""
    x0 = as_sequence(x0)
    vocab.validate_clean(x0)
    if x0.size != xt.tokens.size:
        raise InvalidInputError("length mismatch between x_0 and x_t")
    if (x0[~mu.mask_flags] != xt.tokens[~mu.mask_flags]).any():
        return Tensor(NEG_INF)
    idx = np.nonzero(mu.mask_flags)[0]
    if idx.size == 0:
        return Tensor(0.0)
    return mu.log_rows.gather(idx, x0[idx]).sum()


def _draw_step(
    mu_rows: np.ndarray, tokens: np.ndarray, mask_flags: np.ndarray, stay: float,
    mask_id: int, rng: np.random.Generator,
) -> np.ndarray:
    """One reverse step for a single chain; two uniforms per position."""
    n = tokens.size
    u_stay = rng.random(n)
    u_tok = rng.random(n)
    out = tokens.copy()
    d1 = mu_rows.shape[1]
    for i in range(n):
        if not mask_flags[i]:
            continue
        if u_stay[i] < stay:
            continue
        out[i] = min(np.searchsorted(np.cumsum(mu_rows[i]), u_tok[i], side="right"), d1 - 1)
    return out


def ancestral_sample(
    model, n: int, grid: TimeGrid, schedule: NoiseSchedule, rng: np.random.Generator,
    record: list | None = None, counter=None,
) -> np.ndarray:
    """Sample a clean sequence by reversing from the all-mask state at t=1."""
    vocab = model.vocab
    tokens = np.full(n, vocab.mask_id, dtype=np.int64)
    last_mu = None
    for i in range(grid.T, 0, -1):
        t_cur, t_to = grid.time(i), grid.time(i - 1)
        mask_flags = tokens == vocab.mask_id
        if record is not None:
            record.append(MaskedSample(tokens.copy(), t_cur))
        with no_grad():
            out = predict_mean(model, MaskedSample(tokens, t_cur))
        if counter is not None:
            counter.add_q(1)
            counter.mark_step()
        last_mu = out
        if not mask_flags.any():
            continue
        stay = (1.0 - schedule.alpha(t_to)) / (1.0 - schedule.alpha(t_cur))
        tokens = _draw_step(out.mu, tokens, mask_flags, stay, vocab.mask_id, rng)
    mask_flags = tokens == vocab.mask_id
    if mask_flags.any():
        # forced final unmask from the last evaluated mean (time t(1))
        tokens = _draw_step(last_mu.mu, tokens, mask_flags, 0.0, vocab.mask_id, rng)
    if record is not None:
        record.append(MaskedSample(tokens.copy(), 0.0))
    return tokens


def ancestral_sample_batch(
    model, n: int, grid: TimeGrid, schedule: NoiseSchedule, rng: np.random.Generator,
    batch: int, counter=None,
) -> np.ndarray:
    """Vectorized ancestral sampling of ``batch`` independent chains."""
    vocab = model.vocab
    d1 = vocab.size - 1
    tokens = np.full((batch, n), vocab.mask_id, dtype=np.int64)
    last_mu = None
    for i in range(grid.T, 0, -1):
        t_cur, t_to = grid.time(i), grid.time(i - 1)
        mask_flags = tokens == vocab.mask_id
        with no_grad():
            logits = model.forward_tokens(tokens, np.full(batch, t_cur))
            mu = np.exp(logits.log_softmax().data).reshape(batch, n, d1)
        if counter is not None:
            counter.add_q(batch)
        last_mu = mu
        stay = (1.0 - schedule.alpha(t_to)) / (1.0 - schedule.alpha(t_cur))
        u_stay = rng.random((batch, n))
        u_tok = rng.random((batch, n))
        unmask = mask_flags & (u_stay >= stay)
        if unmask.any():
            cdf = np.cumsum(mu, axis=2)
            draws = (u_tok[..., None] >= cdf).sum(axis=2)
            tokens = np.where(unmask, np.minimum(draws, d1 - 1), tokens)
    mask_flags = tokens == vocab.mask_id
    if mask_flags.any():
        u_tok = rng.random((batch, n))
        cdf = np.cumsum(last_mu, axis=2)
        draws = (u_tok[..., None] >= cdf).sum(axis=2)
        tokens = np.where(mask_flags, np.minimum(draws, d1 - 1), tokens)
    return tokens


# -- optimization -----------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam accumulator state for one parameter dict."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimizerState):
    """Standard Adam update with bias correction; mutates params and opt."""
    opt.step += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name!r}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name!r}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1 - opt.beta1**opt.step)
        v_hat = opt.v[name] / (1 - opt.beta2**opt.step)
        p.data = p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


@dataclass
class EmaState:
    """Exponential moving average of parameters."""

    decay: float
    shadow: dict

    @staticmethod
    def init(params: dict[str, Tensor], decay: float) -> "EmaState":
        return EmaState(decay=decay, shadow={k: p.data.copy() for k, p in params.items()})


def ema_update(ema: EmaState, params: dict[str, Tensor]) -> EmaState:
    for k, p in params.items():
        ema.shadow[k] = ema.decay * ema.shadow[k] + (1 - ema.decay) * p.data
    return ema


def grad_check(params: dict[str, Tensor], loss_closure, eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``loss_closure`` must be deterministic (fix every rng draw beforehand) and
    return a scalar Tensor built from ``params``.
    """
    for p in params.values():
        p.grad = None
    out = loss_closure()
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g_flat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                up = loss_closure().item()
            flat[j] = orig - eps
            with no_grad():
                dn = loss_closure().item()
            flat[j] = orig
            fd = (up - dn) / (2 * eps)
            denom = max(abs(fd), abs(g_flat[j]), 1e-8)
            worst = max(worst, abs(fd - g_flat[j]) / denom)
    return worst
