"""Central-difference verification of tape gradients.

The checker is the independent oracle for every trainable module: it never
touches backward rules, only forward evaluations at perturbed parameter
values. Parameters are probed entry by entry with a symmetric difference
(f(x+eps) - f(x-eps)) / (2 eps) and compared against the tape gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .tensor import Tensor, active_tape, backward, no_grad

REL_ERR_FLOOR = 1e-8  # denominators below this compare absolutely


@dataclass
class ParamCheck:
    """Per-parameter verdict: worst entry and its relative error."""

    name: str
    entries_checked: int
    max_rel_err: float
    worst_entry: int
    worst_fd: float
    worst_autodiff: float


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.max_rel_err >= self.tol]

    def summary_lines(self) -> list[str]:
        lines = []
        for p in self.params:
            mark = "ok" if p.max_rel_err < self.tol else "FAIL"
            lines.append(
                f"{mark:4s} {p.name}: {p.entries_checked} entries, "
                f"max rel err {p.max_rel_err:.3e} (entry {p.worst_entry}: "
                f"fd {p.worst_fd:+.6e} vs autodiff {p.worst_autodiff:+.6e})"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max rel err {self.max_rel_err:.3e} vs tol {self.tol:.1e}")
        return lines


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def _eval_scalar(f, name: str) -> float:
    value = f()
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericError(f"non-finite objective value {v!r} while probing {name}")
    return v


def finite_diff_check(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
    entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of a deterministic scalar `f()` against central differences.

    `f` is a zero-argument callable evaluating the objective at the current
    parameter values; `params` maps names to the leaf tensors it reads. With
    `entries_per_param` set, a seeded subset of entries is probed per tensor,
    otherwise every entry is. Parameter data is restored exactly after probing.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    # One recorded forward/backward supplies the autodiff side.
    for t in params.values():
        t.grad = None
    tape_mark = len(active_tape())
    loss = f()
    if not isinstance(loss, Tensor):
        raise TypeError("objective must return a Tensor scalar")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite objective value at the unperturbed point")
    backward(loss)
    auto = {name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for name, t in params.items()}
    active_tape().truncate(tape_mark)

    report = GradCheckReport(eps=eps, tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n == 0:
            report.params.append(ParamCheck(name, 0, 0.0, -1, 0.0, 0.0))
            continue
        if entries_per_param is not None and entries_per_param < n:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(n, size=entries_per_param, replace=False))
        else:
            idx = np.arange(n)
        ag = auto[name].reshape(-1)
        worst = (-1.0, -1, 0.0, 0.0)
        with no_grad():
            for i in idx:
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = _eval_scalar(f, f"{name}[{i}]")
                flat[i] = saved - eps
                f_minus = _eval_scalar(f, f"{name}[{i}]")
                flat[i] = saved
                fd = (f_plus - f_minus) / (2.0 * eps)
                err = _rel_err(fd, ag[i])
                if err > worst[0]:
                    worst = (err, int(i), fd, float(ag[i]))
        report.params.append(ParamCheck(name, len(idx), max(worst[0], 0.0), worst[1], worst[2], worst[3]))
    return report
