"""Parameter groups, Adam with schedules, and the finite-difference oracle.

Reverse-mode gradients come from torch autograd; this module owns the
optimizer contract (per-group learning rates, post-step projections,
non-finite handling) and the independent central-difference checker that
arbitrates every analytic gradient in the package.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import NonFiniteGradient, StepOutOfRange

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# central-difference step per parameter group
FD_STEPS = {
    "gauss_xyz": 1e-3,
    "gauss_rotation": 1e-3,
    "gauss_scaling": 1e-3,
    "pose": 1e-3,
    "pose_shape": 1e-3,
    "gauss_color": 1e-4,
    "gauss_opacity": 1e-4,
    "texture": 1e-4,
}

GROUP_NAMES = tuple(FD_STEPS)


@dataclass
class Schedule:
    """Geometric interpolation from start to end over total steps."""

    start: float
    end: float
    total: int


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0 or step > schedule.total:
        raise StepOutOfRange(f"step {step} outside [0, {schedule.total}]")
    frac = step / schedule.total
    return schedule.start * (schedule.end / schedule.start) ** frac


@dataclass
class ParamGroup:
    """Named tensors optimized together under one (scheduled) learning rate."""

    name: str
    tensors: list[Tensor]
    lr: float
    schedule: Schedule | None = None


@dataclass
class AdamState:
    """First/second moment buffers matching a group's tensors, plus the step count."""

    m: list[Tensor]
    v: list[Tensor]
    step: int = 0

    @staticmethod
    def for_group(group: ParamGroup) -> "AdamState":
        return AdamState(
            m=[torch.zeros_like(t) for t in group.tensors],
            v=[torch.zeros_like(t) for t in group.tensors],
        )


def _project(name: str, tensors: list[Tensor]) -> None:
    if name in ("gauss_opacity", "gauss_color", "texture"):
        for t in tensors:
            t.clamp_(0.0, 1.0)
    elif name == "gauss_rotation":
        for t in tensors:
            t.div_(t.norm(dim=-1, keepdim=True).clamp(min=1e-12))


def adam_step(group: ParamGroup, state: AdamState) -> None:
    """One bias-corrected Adam update; consumes and zeroes the gradients.

    Opacities, colors and texels are clamped to [0, 1] and quaternions are
    renormalized after the step. A non-finite gradient aborts the whole step
    (values untouched), zeroes the gradients and raises NonFiniteGradient.
    """
    grads = [t.grad if t.grad is not None else torch.zeros_like(t) for t in group.tensors]
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        for t in group.tensors:
            if t.grad is not None:
                t.grad.zero_()
        logger.warning("non-finite gradient in group '%s'; step aborted", group.name)
        raise NonFiniteGradient(f"group '{group.name}' produced a non-finite gradient")

    state.step += 1
    if group.schedule is not None:
        lr = lr_at(group.schedule, min(state.step - 1, group.schedule.total))
    else:
        lr = group.lr
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step

    with torch.no_grad():
        for t, g, m, v in zip(group.tensors, grads, state.m, state.v):
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            t.addcdiv_(m / bc1, (v / bc2).sqrt().add_(ADAM_EPS), value=-lr)
        _project(group.name, group.tensors)
        for t in group.tensors:
            if t.grad is not None:
                t.grad.zero_()


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class FDReport:
    """Outcome of a finite-difference sweep over probed coordinates."""

    probes: int
    excluded: int
    checked: int
    passed_count: int
    max_rel_error: float
    median_rel_error: float
    pass_fraction: float
    passed: bool
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        return (
            f"FD check: {self.passed_count}/{self.checked} probes ok "
            f"({self.excluded} gate-adjacent excluded), max rel {self.max_rel_error:.3g}, "
            f"median rel {self.median_rel_error:.3g} -> {'PASS' if self.passed else 'FAIL'}"
        )


def _eval_closure(closure, params: dict[str, Tensor]) -> tuple[float, bytes | None]:
    out = closure(params)
    if isinstance(out, tuple):
        value, sig = out
    else:
        value, sig = out, None
    return float(value), sig


def finite_diff_check(
    closure,
    params: dict[str, Tensor],
    probes: int = 50,
    seed: int = 0,
    rtol: float = 1e-2,
    required_fraction: float = 0.95,
    steps: dict[str, float] | None = None,
) -> FDReport:
    """Compare autograd gradients of ``closure`` against central differences.

    ``closure`` maps a params dict to a differentiable scalar, optionally
    paired with a discrete-state signature. A probe is excluded when the
    perturbation flips the signature (a hard gate such as the depth mask,
    the 3-sigma cutoff or a z-buffer winner changed) or when one-sided
    derivatives disagree, which catches kinks like |x| at 0. Passes when at
    least ``required_fraction`` of retained probes meet ``rtol``.
    """
    steps = dict(FD_STEPS, **(steps or {}))
    rng = np.random.default_rng(seed)

    grad_params = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    out = closure(grad_params)
    loss = out[0] if isinstance(out, tuple) else out
    loss.backward()
    grads = {
        k: (v.grad.detach().clone() if v.grad is not None else torch.zeros_like(v))
        for k, v in grad_params.items()
    }

    base_value, base_sig = _eval_closure(closure, {k: v.detach() for k, v in params.items()})

    names = sorted(params)
    sizes = np.array([params[k].numel() for k in names])
    total = int(sizes.sum())
    coords = rng.choice(total, size=min(probes, total), replace=False)

    rel_errors: list[float] = []
    failures: list[tuple[str, int, float, float]] = []
    excluded = 0
    for coord in coords:
        gi = int(np.searchsorted(np.cumsum(sizes), coord, side="right"))
        name = names[gi]
        idx = int(coord - (np.cumsum(sizes)[gi] - sizes[gi]))
        h = steps.get(name, 1e-4)

        def _perturbed(delta: float) -> dict[str, Tensor]:
            p = {k: v.detach().clone() for k, v in params.items()}
            flat = p[name].reshape(-1)
            flat[idx] += delta
            return p

        f_plus, sig_plus = _eval_closure(closure, _perturbed(+h))
        f_minus, sig_minus = _eval_closure(closure, _perturbed(-h))

        if base_sig is not None and (sig_plus != base_sig or sig_minus != base_sig):
            excluded += 1
            continue

        d_plus = (f_plus - base_value) / h
        d_minus = (base_value - f_minus) / h
        kink = abs(d_plus - d_minus)
        if kink > 0.25 * max(abs(d_plus), abs(d_minus)) and kink > 1e-7 * (1.0 + abs(d_plus)):
            excluded += 1
            continue

        fd = (f_plus - f_minus) / (2 * h)
        an = float(grads[name].reshape(-1)[idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        rel_errors.append(rel)
        if rel >= rtol:
            failures.append((name, idx, fd, an))

    checked = len(rel_errors)
    passed_count = sum(1 for r in rel_errors if r < rtol)
    frac = passed_count / checked if checked else 1.0
    return FDReport(
        probes=len(coords),
        excluded=excluded,
        checked=checked,
        passed_count=passed_count,
        max_rel_error=max(rel_errors) if rel_errors else 0.0,
        median_rel_error=float(np.median(rel_errors)) if rel_errors else 0.0,
        pass_fraction=frac,
        passed=frac >= required_fraction,
        failures=failures,
    )
