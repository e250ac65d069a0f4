"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import MetricError
from .tensor import Tensor, zero_grads


@dataclass
class ParamCheck:
    name: str
    shape: tuple[int, ...]
    n_checked: int
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(p.ok for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"grad check: tol={self.tol:g} eps={self.eps:g}"]
        for p in self.params:
            status = "ok" if p.ok else "FAIL"
            lines.append(
                f"  {p.name or '<unnamed>'} {p.shape}: checked {p.n_checked}, "
                f"max rel err {p.max_rel_err:.3e} [{status}]"
            )
        return "\n".join(lines)


def grad_check(
    loss_fn,
    params: list[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild the forward graph from the current parameter values
    on every call and return a scalar Tensor. Each checked entry is perturbed
    by +/- eps and the relative error is

        |analytic - numeric| / max(1, |numeric|)

    so tiny gradients are judged on absolute terms. When
    `max_entries_per_param` is set, that many entries are sampled per
    parameter (deterministically, via `rng`); otherwise every entry is
    checked. Raises MetricError if any loss evaluation is non-finite.
    """
    zero_grads(params)
    base = loss_fn()
    if not np.isfinite(base.data).all():
        raise MetricError(f"grad check aborted: loss is non-finite ({float(base.data)})")
    base.backward()
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    report = GradCheckReport(tol=tol, eps=eps)
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n, size=max_entries_per_param, replace=False)
            idxs.sort()
        else:
            idxs = np.arange(n)
        a_flat = a.reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up.data).all() and np.isfinite(down.data).all()):
                raise MetricError(
                    f"grad check aborted: non-finite loss while perturbing "
                    f"{p.name or '<unnamed>'}[{i}]"
                )
            numeric = (float(up.data) - float(down.data)) / (2.0 * eps)
            rel = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
        report.params.append(
            ParamCheck(
                name=p.name,
                shape=p.data.shape,
                n_checked=len(idxs),
                max_rel_err=worst,
                ok=worst <= tol,
            )
        )
    return report
