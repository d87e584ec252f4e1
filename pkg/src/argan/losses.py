"""Objective terms for the translator: least-squares adversarial losses,
cycle consistency (L1), activation reconstruction (normalized squared
Frobenius distance between feature taps) and their weighted total.

The log-likelihood adversarial form is kept behind ``form="log"`` for
completeness; everything the trainer runs uses the least-squares form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # cycle weight
    lam: float = 1.0  # activation-reconstruction weight
    arl_layers: tuple[int, ...] = (0, 1, 2, 3)
    arl_direction: str = "forward"  # forward | backward | both

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.lam)):
            raise ValueError("alpha and lam must be finite")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")
        if self.lam > 0 and not self.arl_layers:
            raise ValueError("arl_layers must be non-empty when lam > 0")
        if self.arl_direction not in ("forward", "backward", "both"):
            raise ValueError(f"unknown arl_direction {self.arl_direction!r}")


@dataclass
class LossReport:
    g_adv_AB: float = 0.0
    g_adv_BA: float = 0.0
    d_A: float = 0.0
    d_B: float = 0.0
    cycle: float = 0.0
    arl: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("g_adv_AB", "g_adv_BA", "d_A", "d_B", "cycle", "arl", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in self.CSV_FIELDS]


def _check_nonempty(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if t.numel() == 0:
            raise ValueError("empty logit array")


def adversarial_loss_d(
    real_logits: torch.Tensor, fake_logits: torch.Tensor, form: str = "lsgan"
) -> torch.Tensor:
    """Discriminator objective: push real logits to 1 and fake logits to 0.

    Least-squares form: mean((real - 1)^2) + mean(fake^2), no halving.
    """
    _check_nonempty(real_logits, fake_logits)
    if form == "lsgan":
        return ((real_logits - 1.0) ** 2).mean() + (fake_logits**2).mean()
    if form == "log":
        return -(
            torch.log(torch.sigmoid(real_logits)).mean()
            + torch.log(1.0 - torch.sigmoid(fake_logits)).mean()
        )
    raise ValueError(f"unknown adversarial form {form!r}")


def adversarial_loss_g(fake_logits: torch.Tensor, form: str = "lsgan") -> torch.Tensor:
    """Non-saturating generator objective: push fake logits to 1."""
    _check_nonempty(fake_logits)
    if form == "lsgan":
        return ((fake_logits - 1.0) ** 2).mean()
    if form == "log":
        return -torch.log(torch.sigmoid(fake_logits)).mean()
    raise ValueError(f"unknown adversarial form {form!r}")


def cycle_loss(
    a: torch.Tensor,
    a_reconstructed: torch.Tensor,
    b: torch.Tensor,
    b_reconstructed: torch.Tensor,
) -> torch.Tensor:
    """Mean absolute reconstruction error of both translation cycles."""
    if a.shape != a_reconstructed.shape or b.shape != b_reconstructed.shape:
        raise ValueError("cycle_loss shape mismatch")
    return (a_reconstructed - a).abs().mean() + (b_reconstructed - b).abs().mean()


def arl(
    taps_x: Sequence[torch.Tensor],
    taps_y: Sequence[torch.Tensor],
    layers: Sequence[int] = (0, 1, 2, 3),
) -> torch.Tensor:
    """Sum over selected taps of squared Frobenius distance over element count."""
    if not layers:
        raise ValueError("no layers selected")
    total = None
    for i in layers:
        x, y = taps_x[i], taps_y[i]
        if x.shape != y.shape:
            raise ValueError(f"tap {i} shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        term = ((x - y) ** 2).sum() / x.numel()
        total = term if total is None else total + term
    return total


def total_objective(
    g_adv_AB: float, g_adv_BA: float, cycle: float, arl_value: float, weights: LossWeights
) -> float:
    """Generator-side composition; discriminator losses are reported separately."""
    return g_adv_AB + g_adv_BA + weights.alpha * cycle + weights.lam * arl_value


def make_report(
    g_adv_AB: float,
    g_adv_BA: float,
    d_A: float,
    d_B: float,
    cycle: float,
    arl_value: float,
    weights: LossWeights,
) -> LossReport:
    return LossReport(
        g_adv_AB=g_adv_AB,
        g_adv_BA=g_adv_BA,
        d_A=d_A,
        d_B=d_B,
        cycle=cycle,
        arl=arl_value,
        total=total_objective(g_adv_AB, g_adv_BA, cycle, arl_value, weights),
    )


def grad_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    epsilon: float = 1e-5,
    n_samples: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least ``n_samples`` scalar coordinates across all parameters
    (all of them if there are fewer). Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    names = list(params)
    tensors = [params[n] for n in names]
    for t in tensors:
        t.requires_grad_(True)
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss in grad_check")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(t) for g, t in zip(grads, tensors)
    ]

    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    rng = torch.Generator().manual_seed(seed)
    k = min(total, max(n_samples, 32))
    flat_idx = torch.randperm(total, generator=rng)[:k].tolist()

    max_err = 0.0
    with torch.no_grad():
        for idx in flat_idx:
            ti = 0
            while idx >= sizes[ti]:
                idx -= sizes[ti]
                ti += 1
            t = tensors[ti]
            flat = t.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + epsilon
            loss_plus = loss_fn(params).item()
            flat[idx] = orig - epsilon
            loss_minus = loss_fn(params).item()
            flat[idx] = orig
            if not (math.isfinite(loss_plus) and math.isfinite(loss_minus)):
                raise ValueError("non-finite loss during finite differencing")
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = grads[ti].view(-1)[idx].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            max_err = max(max_err, abs(analytic - numeric) / denom)
    return max_err
