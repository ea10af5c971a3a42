"""The weight-shared recurrent loop and its stability/halting machinery.

State update, per iteration t on token states h (B, N, dim):

    h_{t+1} = A * h_t + B * e + block(h_t + loop_embed(t) + lora(h_t, t))

where e is the frozen encoder output, A is a per-channel transition held in
(0, 1) by construction (so the linear part of the map is a strict
contraction) and B is a per-channel input gain. Adaptive halting follows
the cumulative-probability rule: a token stops once its summed halting
probability crosses the threshold, takes the remainder 1 - C as its final
readout weight, and is frozen afterwards. Frozen tokens keep their last
state visible to attention as keys/values but receive no loop embedding,
no adapter delta, no state update, and no further halting evaluation; the
freeze decision itself is a non-differentiable constant while gradients
flow through the probability values and readout weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embeddings import loop_index_embed
from .errors import ConfigError, NumericError
from .nn import Linear, Module
from .rng import RngState
from .tensor import Tensor

# exp(s) >= 30 whenever s >= ln(30) ~ 3.4, so capping s at 4.0 before the
# inner exp changes nothing downstream of the 30-cap but keeps the exp
# finite for arbitrarily large parameters. The matching floor keeps the
# rate above float64 resolution around 1.0: a rate below ~1e-16 would
# round A = exp(-rate) up to exactly 1 and silently void the contraction.
_EXPONENT_CAP = 30.0
_EXPONENT_FLOOR = float(np.exp(-30.0))
_PRE_CAP = 4.0


class LTIInjection(Module):
    """Per-channel stable transition A and input gain B.

    A = exp(-rate) with rate = exp(log_dt + log_A) clamped into
    [e^-30, 30], so A stays strictly inside (0, 1) for every parameter
    value even under float64 rounding; zero init gives A = exp(-1).
    """

    def __init__(self, dim: int):
        self.log_dt = Tensor(np.zeros(()), requires_grad=True)
        self.log_a = Tensor(np.zeros(dim), requires_grad=True)
        self.gain = Tensor(np.ones(dim), requires_grad=True)

    def transition(self) -> Tensor:
        s = T.clamp_max(self.log_dt + self.log_a, _PRE_CAP)
        rate = T.clamp_min(T.clamp_max(T.exp(s), _EXPONENT_CAP), _EXPONENT_FLOOR)
        return T.exp(-rate)

    def spectral_radius(self) -> float:
        return float(np.max(self.transition().data))


def lti_step(a: Tensor, gain: Tensor, h: Tensor, e: Tensor, block_out: Tensor) -> Tensor:
    return a * h + gain * e + block_out


def fixed_point(a: Tensor, gain: Tensor, e: Tensor) -> Tensor:
    """Fixed point of the zero-block recurrence, h* = B e / (1 - A)."""
    return gain * e / (1.0 - a)


class DepthLoRA(Module):
    """Depth-indexed low-rank adapter: delta = (x A_down * s_t) B_up.

    B_up starts at zero, so the adapter is exactly inert at init. Parameter
    cost is 2 * dim * rank + T * rank.
    """

    def __init__(self, dim: int, rank: int, t_max: int, rng: RngState):
        self.down = Tensor(rng.trunc_normal((dim, rank), std=0.02), requires_grad=True)
        self.up = Tensor(np.zeros((rank, dim)), requires_grad=True)
        self.scale = Tensor(np.ones((t_max, rank)), requires_grad=True)
        self.t_max = t_max

    def delta(self, x: Tensor, t: int) -> Tensor:
        if not 0 <= t < self.t_max:
            raise ConfigError(f"adapter depth index {t} out of range [0, {self.t_max})")
        return T.matmul(T.matmul(x, self.down) * self.scale[t], self.up)


class HaltingHead(Module):
    """sigmoid(w . h + b); bias starts at -1 so tokens do not halt at once."""

    def __init__(self, dim: int, rng: RngState):
        self.proj = Linear(dim, 1, rng)
        self.proj.bias.data[...] = -1.0

    def __call__(self, h: Tensor) -> Tensor:
        b, n, _ = h.shape
        return T.sigmoid(self.proj(h).reshape(b, n))


@dataclass
class LoopStats:
    """Per-forward diagnostics of the recurrent loop (numpy, no gradients)."""

    iters_per_token: np.ndarray  # (B, N) terminal iteration count T_n >= 1
    spectral_radius: float
    state_deltas: list = field(default_factory=list)  # ||h_{t+1} - h_t|| per iteration
    loops_run: int = 0

    @property
    def mean_ponder(self) -> float:
        return float(self.iters_per_token.mean())

    @property
    def halting_entropy(self) -> float:
        """Entropy of the per-token compute allocation, mean over the batch.

        For one sample with token budgets T_n: H = -sum_n q_n log q_n with
        q_n = T_n / sum(T_n). Uniform allocation gives log(N), a single
        dominant token gives 0.
        """
        tn = self.iters_per_token.astype(np.float64)
        q = tn / tn.sum(axis=1, keepdims=True)
        return float(-(q * np.log(q)).sum(axis=1).mean())

    @property
    def effective_cost(self) -> float:
        """Block applications actually paid per sample (unit cost per token
        per iteration), mean over the batch."""
        return float(self.iters_per_token.sum(axis=1).mean())

    @classmethod
    def empty(cls, batch: int, tokens: int, depth: int) -> "LoopStats":
        return cls(
            iters_per_token=np.full((batch, tokens), depth, dtype=np.int64),
            spectral_radius=0.0,
            state_deltas=[],
            loops_run=depth,
        )


def act_readout(states: list, weights: list) -> Tensor:
    """Halting-weighted state mixture, sum_t w_t h_t."""
    out = None
    for h, w in zip(states, weights):
        term = h * w.reshape(w.shape[0], w.shape[1], 1)
        out = term if out is None else out + term
    return out


def ponder_cost(p: Tensor, lam: float) -> Tensor:
    """lam * mean over tokens of sum_t p_t; p is (B, N, T) with zeros at
    frozen iterations (the caller masks them)."""
    return lam * p.sum(axis=-1).mean()


def recurrent_loop(
    block,
    injection: LTIInjection,
    halt: HaltingHead,
    lora: DepthLoRA | None,
    e: Tensor,
    loops: int,
    threshold: float,
    dim: int,
    train: bool = False,
    rng: RngState | None = None,
):
    """Run the shared block for `loops` iterations with adaptive halting.

    Returns (h_out, ponder_probs, stats, weights) where h_out is the
    halting-weighted readout, ponder_probs is the (B, N, T) tensor fed to
    the ponder cost, stats carries the non-differentiable diagnostics and
    weights is the per-iteration list of readout weights (each (B, N),
    summing to 1 per token). `loops` may exceed the adapter's trained
    depth; the depth index is clamped to the last trained row in that case.
    """
    if loops < 1:
        raise ConfigError(f"loop count must be >= 1, got {loops}")
    bsz, n, _ = e.shape
    a = injection.transition()
    h = e  # the loop starts from the encoded input itself
    frozen = np.zeros((bsz, n), dtype=bool)
    cum = T.zeros((bsz, n))
    states: list[Tensor] = []
    weights: list[Tensor] = []
    probs: list[Tensor] = []
    term_iter = np.full((bsz, n), loops - 1, dtype=np.int64)
    deltas: list[float] = []
    for t in range(loops):
        active = ~frozen
        active_c = T.constant(active.astype(h.data.dtype)[:, :, None], like=h)
        extra = T.constant(loop_index_embed(t, dim), like=h)
        if lora is not None:
            extra = extra + lora.delta(h, min(t, lora.t_max - 1))
        block_in = h + active_c * extra
        try:
            out = block(block_in, train, rng)
            # The block's identity path is stripped so the state's only
            # linear feed-through is A; that contraction is what makes
            # running extra iterations at inference safe.
            h_new = lti_step(a, injection.gain, h, e, out - block_in)
        except NumericError as err:
            raise NumericError(f"loop iteration {t}: {err}") from err
        prev = h.data
        h = active_c * h_new + (1.0 - active_c) * h
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite state at loop iteration {t}")
        deltas.append(float(np.linalg.norm(h.data - prev)))
        states.append(h)
        p = halt(h)
        active_f = T.constant(active.astype(p.data.dtype), like=p)
        probs.append(active_f * p)
        if t == loops - 1:
            terminate = active
        else:
            terminate = active & ((cum.data + p.data) >= threshold)
        term_c = T.constant(terminate.astype(p.data.dtype), like=p)
        cont_c = T.constant((active & ~terminate).astype(p.data.dtype), like=p)
        weights.append(term_c * (1.0 - cum) + cont_c * p)
        cum = cum + cont_c * p
        term_iter[terminate] = t
        frozen |= terminate
    h_out = act_readout(states, weights)
    ponder_probs = T.concat([p.reshape(bsz, n, 1) for p in probs], axis=2)
    stats = LoopStats(
        iters_per_token=term_iter + 1,
        spectral_radius=float(np.max(a.data)),
        state_deltas=deltas,
        loops_run=loops,
    )
    return h_out, ponder_probs, stats, weights
