"""Reference steering baselines: Best-of-N, value-guided particles, RTB.

Best-of-N and particle guidance are inference-time only; the relative
trajectory-balance loss trains the model on fully simulated trajectories with
a trainable scalar log-partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, collect_grads, no_grad, zero_grads
from .core import (
    InvalidInputError,
    InvalidSampleError,
    MaskedSample,
    NoiseSchedule,
    TimeGrid,
    is_neg_inf,
)
from .denoiser import _draw_step, predict_mean, transition_logprob
from .objectives import CallCounter, LossResult, RewardModel


@dataclass
class Trajectory:
    """Reverse-chain states from t=1 down to t=0 with per-step log-probs."""

    states: list
    step_logprobs: list

    def __post_init__(self):
        times = [s.t for s in self.states]
        if any(b >= a for a, b in zip(times, times[1:])):
            raise InvalidInputError("trajectory times must strictly decrease")

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1].tokens


def best_of_n(pre_model, reward: RewardModel, N: int, grid: TimeGrid,
              schedule: NoiseSchedule, rng: np.random.Generator,
              counter: CallCounter | None = None) -> np.ndarray:
    """Draw N base samples, return the reward argmax (ties: lowest index)."""
    if N < 1:
        raise InvalidInputError("N must be >= 1")
    from .denoiser import ancestral_sample

    best, best_r = None, -math.inf
    for _ in range(N):
        x = ancestral_sample(pre_model, pre_model.n, grid, schedule, rng, counter=counter)
        r = reward.log_reward(x)
        if counter is not None:
            counter.add_reward(1)
        if r > best_r:
            best, best_r = x, r
    return best


def guided_particle_sample(pre_model, reward: RewardModel, n_particles: int,
                           grid: TimeGrid, schedule: NoiseSchedule,
                           rng: np.random.Generator,
                           counter: CallCounter | None = None,
                           selection: str = "argmax") -> np.ndarray:
    """Value-guided inference: keep the best of n candidate next-states per step.

    Candidates are scored by the reward of their argmax-decoded one-step
    denoised prediction. The initial all-mask evaluation happens during setup,
    so each reverse step costs exactly ``n_particles`` model calls.
    """
    if n_particles < 1:
        raise InvalidInputError("n_particles must be >= 1")
    if selection not in ("argmax", "softmax"):
        raise InvalidInputError(f"unknown selection rule {selection!r}")
    vocab = pre_model.vocab
    n = pre_model.n
    tokens = np.full(n, vocab.mask_id, dtype=np.int64)
    # setup evaluation at the all-mask state: input-independent, cacheable,
    # so it is not billed to any inference step
    with no_grad():
        cur_out = predict_mean(pre_model, MaskedSample(tokens, 1.0))
    for i in range(grid.T, 0, -1):
        t_cur, t_to = grid.time(i), grid.time(i - 1)
        mask_flags = tokens == vocab.mask_id
        if not mask_flags.any():
            break
        stay = (1.0 - schedule.alpha(t_to)) / (1.0 - schedule.alpha(t_cur))
        cands, outs, scores = [], [], []
        for _ in range(n_particles):
            cand = _draw_step(cur_out.mu, tokens, mask_flags, stay, vocab.mask_id, rng)
            with no_grad():
                out = predict_mean(pre_model, MaskedSample(cand, t_to))
            if counter is not None:
                counter.add_q(1)
            decoded = np.where(cand == vocab.mask_id, out.mu.argmax(axis=1), cand)
            scores.append(reward.log_reward(decoded))
            if counter is not None:
                counter.add_reward(1)
            cands.append(cand)
            outs.append(out)
        if selection == "argmax":
            k = int(np.argmax(scores))
        else:
            w = np.exp(np.array(scores) - max(scores))
            k = int(rng.choice(n_particles, p=w / w.sum()))
        tokens, cur_out = cands[k], outs[k]
        if counter is not None:
            counter.mark_step()
    mask_flags = tokens == vocab.mask_id
    if mask_flags.any():
        tokens = _draw_step(cur_out.mu, tokens, mask_flags, 0.0, vocab.mask_id, rng)
    return tokens


def simulate_trajectory(model, n: int, grid: TimeGrid, schedule: NoiseSchedule,
                        rng: np.random.Generator,
                        counter: CallCounter | None = None) -> Trajectory:
    """Roll the reverse chain under ``model``, recording states and log-probs."""
    vocab = model.vocab
    tokens = np.full(n, vocab.mask_id, dtype=np.int64)
    states = [MaskedSample(tokens.copy(), 1.0)]
    logps: list[float] = []
    for i in range(grid.T, 0, -1):
        t_cur, t_to = grid.time(i), grid.time(i - 1)
        cur = MaskedSample(tokens, t_cur)
        mask_flags = tokens == vocab.mask_id
        with no_grad():
            out = predict_mean(model, cur)
        if counter is not None:
            counter.add_q(1)
        if mask_flags.any():
            stay = (1.0 - schedule.alpha(t_to)) / (1.0 - schedule.alpha(t_cur))
            nxt = _draw_step(out.mu, tokens, mask_flags, stay, vocab.mask_id, rng)
            if (nxt == vocab.mask_id).any() and i == 1:
                still = nxt == vocab.mask_id
                nxt = _draw_step(out.mu, nxt, still, 0.0, vocab.mask_id, rng)
        else:
            nxt = tokens.copy()
        logps.append(transition_logprob(out, cur, nxt, t_to, schedule, vocab).item())
        tokens = nxt
        states.append(MaskedSample(tokens.copy(), t_to))
    return Trajectory(states, logps)


def rtb_loss(q_model, pre_model, reward: RewardModel, logz_scalar: Tensor,
             traj: Trajectory, detach_fraction: float, rng: np.random.Generator,
             schedule: NoiseSchedule | None = None,
             counter: CallCounter | None = None) -> LossResult:
    """Squared trajectory-balance residual over a full simulated trajectory.

    A uniformly chosen ``detach_fraction`` of steps contribute their values
    without gradients; gradients flow into ``q_model`` and ``logz_scalar``.
    """
    if not 0.0 <= detach_fraction < 1.0:
        raise InvalidInputError("detach_fraction must lie in [0, 1)")
    if schedule is None:
        raise InvalidInputError("rtb_loss requires the noise schedule of the trajectory")
    vocab = q_model.vocab
    steps = len(traj.states) - 1
    n_detach = int(round(detach_fraction * steps))
    detached = set(rng.choice(steps, size=n_detach, replace=False).tolist()) if n_detach else set()
    zero_grads(q_model.params)
    logz_scalar.grad = None
    total = Tensor(0.0) + logz_scalar
    for j in range(steps):
        cur, nxt = traj.states[j], traj.states[j + 1]
        if j in detached:
            with no_grad():
                out_q = predict_mean(q_model, cur)
                lp_q = transition_logprob(out_q, cur, nxt.tokens, nxt.t, schedule, vocab).item()
            lp_q_term = Tensor(lp_q)
        else:
            out_q = predict_mean(q_model, cur)
            lp_q_term = transition_logprob(out_q, cur, nxt.tokens, nxt.t, schedule, vocab)
        with no_grad():
            out_pre = predict_mean(pre_model, cur)
        lp_pre = transition_logprob(out_pre, cur, nxt.tokens, nxt.t, schedule, vocab).item()
        if counter is not None:
            counter.add_pre(1)
            counter.add_q(1)
        if is_neg_inf(lp_pre) or is_neg_inf(lp_q_term.item()):
            raise InvalidSampleError("trajectory step outside a model's support")
        total = total + lp_q_term - lp_pre
    total = total - reward.log_reward(traj.x0)
    if counter is not None:
        counter.add_reward(1)
    loss = total * total
    loss.backward()
    grads = collect_grads(q_model.params)
    grads["__logz__"] = (logz_scalar.grad.copy() if logz_scalar.grad is not None
                         else np.zeros_like(logz_scalar.data))
    return LossResult(loss.item(), grads, {"residual": total.item()})