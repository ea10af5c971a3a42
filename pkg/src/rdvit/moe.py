"""Mixture-of-experts FFN with bias-steered top-k routing.

Selection and weighting are deliberately decoupled: experts are picked by
g + b where b is a per-expert load-balancing bias, but the combine weights
come from a bias-free softmax over the raw logits g, gathered at the
selected experts and renormalized to sum to one. The bias takes part in
selection only and never receives a gradient; it moves by a fixed-size
sign step after each optimizer update, nudging load toward the mean.

At this scale the forward pass runs every expert densely on every token
and masks by the routing weights, which is numerically identical to
gather/scatter dispatch. A shared expert (hidden width expert_dim * k) is
always on and added to the routed output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module, ModuleList, SwiGLU
from .rng import RngState
from .tensor import Tensor


class MoELayer(Module):
    def __init__(self, dim: int, num_experts: int, top_k: int, expert_dim: int, rng: RngState):
        if not 1 <= top_k <= num_experts:
            raise ConfigError(f"top_k {top_k} out of range for {num_experts} experts")
        self.router = Linear(dim, num_experts, rng.spawn("router"), bias=False)
        self.experts = ModuleList(
            SwiGLU(dim, rng.spawn("expert", i), hidden=expert_dim) for i in range(num_experts)
        )
        self.shared = SwiGLU(dim, rng.spawn("shared"), hidden=expert_dim * top_k)
        self.register_buffer(
            "route_bias", np.zeros(num_experts, dtype=T.default_dtype()), countable=True
        )
        self.num_experts = num_experts
        self.top_k = top_k
        self.expert_dim = expert_dim
        self.dim = dim
        self.last_indices: np.ndarray | None = None

    def route(self, x: Tensor):
        """Pick experts and weights for each token.

        Returns (indices, weights, weights_full): indices is (..., k) int,
        weights the matching (..., k) renormalized array, and weights_full
        the differentiable (..., E) tensor with zeros off the selection.
        Ties in the biased score resolve toward the lower expert index.
        """
        logits = self.router(x)
        biased = logits.data + self.get_buffer("route_bias").astype(logits.data.dtype)
        order = np.argsort(-biased, axis=-1, kind="stable")
        indices = order[..., : self.top_k]
        mask = np.zeros(logits.shape, dtype=logits.data.dtype)
        np.put_along_axis(mask, indices, 1.0, axis=-1)
        probs = T.softmax(logits, axis=-1)
        picked = probs * T.constant(mask, like=probs)
        weights_full = picked / picked.sum(axis=-1, keepdims=True)
        weights = np.take_along_axis(weights_full.data, indices, axis=-1)
        return indices, weights, weights_full

    def __call__(self, x: Tensor, train: bool = False, rng: RngState | None = None) -> Tensor:
        indices, _, weights_full = self.route(x)
        self.last_indices = indices
        out = self.shared(x)
        for i, expert in enumerate(self.experts):
            w = weights_full[..., i : i + 1]
            out = out + w * expert(x)
        return out

    def expert_load(self, indices: np.ndarray | None = None) -> np.ndarray:
        """Assignment counts per expert from the last (or given) routing."""
        if indices is None:
            indices = self.last_indices
        if indices is None:
            raise ConfigError("no routing recorded yet")
        return np.bincount(indices.reshape(-1), minlength=self.num_experts).astype(np.int64)


def update_router_bias(layer: MoELayer, counts: np.ndarray, gamma: float = 0.001) -> np.ndarray:
    """b_e += gamma * sign(mean_load - load_e); overloaded experts drift
    down, starved experts drift up, a balanced layer stays put. Called
    after the optimizer step; not part of the gradient graph."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (layer.num_experts,):
        raise ConfigError(f"expected {layer.num_experts} expert counts, got {counts.shape}")
    bias = layer.get_buffer("route_bias")
    step = (gamma * np.sign(counts.mean() - counts)).astype(bias.dtype)
    layer.set_buffer("route_bias", bias + step)
    return layer.get_buffer("route_bias")


def moe_param_count(dim: int, num_experts: int, top_k: int, expert_dim: int) -> dict:
    """Closed-form parameter accounting (weights only; experts carry no
    biases). Routed: E * 3 * dim * expert_dim. Shared: 3 * dim * (expert_dim
    * k). `total` is routed + shared; the router (dim * E weights plus E
    balancing-bias slots) is small and reported separately."""
    routed = num_experts * 3 * dim * expert_dim
    shared = 3 * dim * (expert_dim * top_k)
    router = dim * num_experts + num_experts
    return {
        "routed": routed,
        "shared": shared,
        "router": router,
        "total": routed + shared,
    }


@dataclass
class UtilizationStats:
    """Class-conditional routing table: counts[c, e] = how many assignments
    of class-c tokens landed on expert e."""

    counts: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        safe = np.where(totals == 0, 1, totals)
        return self.counts / safe

    def chi_squared_independence(self):
        """Test whether routing depends on token class (chi-squared test of
        independence on the contingency table). Returns (stat, dof, p)."""
        from scipy import stats as _stats

        table = self.counts[self.counts.sum(axis=1) > 0]
        cols = table[:, table.sum(axis=0) > 0]
        if cols.shape[0] < 2 or cols.shape[1] < 2:
            return 0.0, 0, 1.0
        total = cols.sum()
        expected = np.outer(cols.sum(axis=1), cols.sum(axis=0)) / total
        stat = float(((cols - expected) ** 2 / expected).sum())
        dof = (cols.shape[0] - 1) * (cols.shape[1] - 1)
        p = float(_stats.chi2.sf(stat, dof))
        return stat, dof, p


def expert_utilization(indices_list, labels_list, num_experts: int, num_classes: int) -> UtilizationStats:
    """Accumulate class-by-expert assignment counts over batches.

    indices_list yields (..., k) routing indices, labels_list the matching
    (...,) integer token classes.
    """
    counts = np.zeros((num_classes, num_experts), dtype=np.int64)
    for indices, labels in zip(indices_list, labels_list):
        flat_idx = indices.reshape(-1, indices.shape[-1])
        flat_lab = labels.reshape(-1)
        if flat_idx.shape[0] != flat_lab.shape[0]:
            raise ConfigError("routing indices and labels disagree in token count")
        for k in range(flat_idx.shape[1]):
            np.add.at(counts, (flat_lab, flat_idx[:, k]), 1)
    return UtilizationStats(counts)
