"""Optimal-transport alignment of a variable-size token set to ``n`` virtual tokens.

The source rows are mapped by a linear kernel into the LM embedding space,
coupled to trainable reference points with entropic OT (uniform marginals,
squared-Euclidean cost), and pooled with the row-normalised plan.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

_NEG = -1e30


@dataclass
class AlignConfig:
    num_virtual_tokens: int = 64
    target_dim: int = 256
    epsilon: float = 0.05
    max_iters: int = 100
    convergence_tol: float = 1e-6
    # "max" divides each instance's cost by its largest entry so epsilon is
    # relative to the spread of the point clouds; "none" uses raw costs.
    cost_normalization: str = "max"
    # anneal epsilon down from the largest cost, halving every
    # ``scaling_iters`` updates, before the main loop; speeds up small epsilon
    epsilon_scaling: bool = False
    scaling_iters: int = 10
    linear_align: bool = False  # ablation: mean-pool + affine instead of OT

    def __post_init__(self):
        if self.num_virtual_tokens < 1:
            raise ValueError("num_virtual_tokens must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1 or self.convergence_tol <= 0 or self.scaling_iters < 1:
            raise ValueError("max_iters and convergence_tol must be positive")
        if self.cost_normalization not in ("max", "none"):
            raise ValueError(f"unknown cost_normalization {self.cost_normalization!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TransportPlan:
    matrix: torch.Tensor  # (n, m) or (B, n, m)
    converged: torch.Tensor  # bool, () or (B,)
    iterations: int
    violations: list[float]  # max marginal violation after each iteration


def kernel_embed(h_s: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Row-wise ``h_s @ weight + bias``; ``weight`` is (a, b)."""
    return h_s @ weight + bias


def squared_cost(z: torch.Tensor, h_r: torch.Tensor) -> torch.Tensor:
    """``C[..., i, j] = |z_i - h_j|^2`` for z (n, b) and h_r (..., m, b)."""
    zz = (z * z).sum(-1)[:, None]
    hh = (h_r * h_r).sum(-1)[..., None, :]
    return (zz + hh - 2.0 * z @ h_r.transpose(-1, -2)).clamp_min(0.0)


def sinkhorn_batched(
    h_r: torch.Tensor,
    z: torch.Tensor,
    config: AlignConfig,
    valid: torch.Tensor | None = None,
    early_stop: bool = True,
) -> TransportPlan:
    """Entropic OT plan between ``z`` (n, b) and each set in ``h_r`` (B, m, b).

    The squared-Euclidean cost is divided by its per-instance maximum unless
    ``config.cost_normalization == "none"``. Runs the alternating scaling
    updates on log-potentials, optionally warm-started by epsilon annealing. ``valid`` (B, m) marks real source rows;
    padded rows get zero mass. With ``early_stop``,
    each instance stops updating once its row marginals are within
    ``convergence_tol`` and the loop exits when all have converged; without
    it exactly ``max_iters`` iterations are unrolled. The plan is computed
    and returned in float64 whatever the input dtype.
    """
    # float64 throughout: in float32 the convergence test is noisy enough
    # that reordered inputs can stop one iteration apart
    h_r, z = h_r.to(torch.float64), z.to(torch.float64)
    B, m, _ = h_r.shape
    n = z.shape[0]
    if valid is None:
        valid = torch.ones(B, m, dtype=torch.bool, device=h_r.device)
    cost = squared_cost(z, h_r)
    if not torch.isfinite(cost).all():
        raise FloatingPointError("non-finite entries in the transport cost")
    if config.cost_normalization == "max":
        scale = torch.where(valid[:, None, :], cost, 0.0).amax(dim=(-1, -2), keepdim=True)
        cost = cost / scale.clamp_min(1e-12)
    counts = valid.sum(-1, keepdim=True).to(h_r.dtype)  # (B, 1)
    log_b = torch.where(valid, -torch.log(counts), torch.full_like(counts, _NEG))  # (B, m)
    log_a = -math.log(n)
    col_ok = valid[:, None, :]

    def update(f, g, log_k):
        f = log_a - torch.logsumexp(torch.where(col_ok, log_k + g[:, None, :], _NEG), dim=-1)
        g_new = log_b - torch.logsumexp(log_k + f[:, :, None], dim=-2)
        return f, torch.where(valid, g_new, log_b)

    f = torch.zeros(B, n, dtype=h_r.dtype, device=h_r.device)
    g = log_b.clone()
    if config.epsilon_scaling:
        # warm start: potentials are carried over in cost units (eps * f)
        eps = max(float(cost.detach().max()), config.epsilon)
        while eps > config.epsilon:
            for _ in range(config.scaling_iters):
                f, g = update(f, g, -cost / eps)
            nxt = max(eps / 2, config.epsilon)
            f, g = f * (eps / nxt), torch.where(valid, g * (eps / nxt), log_b)
            eps = nxt
    log_k = -cost / config.epsilon
    active = torch.ones(B, dtype=torch.bool, device=h_r.device)
    violations = []
    it = 0
    for it in range(1, config.max_iters + 1):
        f_new, g_new = update(f, g, log_k)
        if early_stop:
            f = torch.where(active[:, None], f_new, f)
            g = torch.where(active[:, None], g_new, g)
        else:
            f, g = f_new, g_new
        with torch.no_grad():
            plan = torch.exp(f[:, :, None] + log_k + g[:, None, :]) * col_ok
            row_err = (plan.sum(-1) - 1.0 / n).abs().amax(-1)
            col_err = torch.where(valid, (plan.sum(-2) - 1.0 / counts).abs(), 0.0).amax(-1)
            err = torch.maximum(row_err, col_err)
            violations.append(float(err.max()))
            active = active & (err >= config.convergence_tol)
        if early_stop and not active.any():
            break
    plan = torch.exp(f[:, :, None] + log_k + g[:, None, :]) * col_ok
    return TransportPlan(plan, ~active, it, violations)


def sinkhorn(h_r: torch.Tensor, z: torch.Tensor, config: AlignConfig, early_stop: bool = True) -> TransportPlan:
    """Single-instance plan of shape (n, m) between ``z`` (n, b) and ``h_r`` (m, b)."""
    if h_r.shape[0] < 1 or z.shape[0] < 1:
        raise ValueError("sinkhorn needs at least one point on each side")
    tp = sinkhorn_batched(h_r[None], z, config, early_stop=early_stop)
    return TransportPlan(tp.matrix[0], tp.converged[0], tp.iterations, tp.violations)


class OTAlign(nn.Module):
    """Kernel embedding + Sinkhorn pooling against trainable reference points."""

    def __init__(self, source_dim: int, config: AlignConfig):
        super().__init__()
        self.config = config
        self.kernel = nn.Linear(source_dim, config.target_dim)
        self.z = nn.Parameter(torch.randn(config.num_virtual_tokens, config.target_dim))
        self.early_stop = True

    def forward(self, h: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """Map (B, m, a) source rows to (B, n, b) virtual tokens."""
        if h.shape[1] == 0:
            return self.z.expand(h.shape[0], -1, -1)
        h_r = kernel_embed(h, self.kernel.weight.T, self.kernel.bias)
        tp = sinkhorn_batched(h_r, self.z, self.config, valid, early_stop=self.early_stop)
        self.last_plan = tp
        out = self.config.num_virtual_tokens * tp.matrix @ h_r.to(tp.matrix.dtype)
        return out.to(h_r.dtype)


class LinearAlign(nn.Module):
    """Ablation: mean-pool the source rows, then one affine map to ``n`` tokens."""

    def __init__(self, source_dim: int, config: AlignConfig):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(source_dim, config.num_virtual_tokens * config.target_dim)

    def forward(self, h: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        B, m, _ = h.shape
        if valid is None:
            valid = torch.ones(B, m, dtype=torch.bool, device=h.device)
        w = valid.to(h.dtype)
        pooled = (h * w[..., None]).sum(1) / w.sum(1, keepdim=True).clamp_min(1.0)
        return self.proj(pooled).view(B, self.config.num_virtual_tokens, self.config.target_dim)


def make_aligner(source_dim: int, config: AlignConfig) -> nn.Module:
    return LinearAlign(source_dim, config) if config.linear_align else OTAlign(source_dim, config)


def align(h_L: torch.Tensor, params: OTAlign) -> torch.Tensor:
    """Virtual tokens (n, b) for one encoded report ``h_L`` (m, a)."""
    if h_L.shape[0] == 0:
        return params.z
    return params(h_L[None])[0]
