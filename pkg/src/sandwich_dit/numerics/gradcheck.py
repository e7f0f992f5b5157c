"""Central finite-difference checks against registered vector-Jacobian products."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .rng import Rng
from .tensor import MissingVjpError, OpDef, Tensor, apply, backward, get_op, no_grad, registered_ops

DEFAULT_STEP = 1e-5


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24s} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e}"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Entries tiny relative to the gradient's overall scale are judged against that scale.
    floor = max(1e-3 * float(np.max(np.abs(numeric), initial=0.0)), 1e-10)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def _resolve(f, attrs) -> tuple[str, Callable[..., Tensor]]:
    if isinstance(f, str):
        f = get_op(f)
    if isinstance(f, OpDef):
        opdef = f
        if opdef.vjp is None:
            raise MissingVjpError(f"op {opdef.name!r} has no registered vjp")
        return opdef.name, lambda *xs: apply(opdef, xs, dict(attrs or {}))
    return getattr(f, "__name__", "fn"), f


def grad_check(f, inputs, tol: float = 1e-6, *, attrs=None, step: float = DEFAULT_STEP,
               seed: int = 0, wrt=None, name: str | None = None) -> GradCheckReport:
    """Compare the analytic vjp of ``f`` with central differences in float64.

    ``f`` is an op name, an :class:`OpDef`, or a callable over tensors. The output is
    contracted with a fixed random cotangent so one backward pass checks every input.
    ``wrt`` restricts the check to the given input positions.
    """
    label, fn = _resolve(f, attrs)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    cot = Rng(seed).child("cotangent").normal(out.shape)
    backward(out, cot)

    def objective() -> float:
        with no_grad():
            return float(np.sum(cot * fn(*[Tensor(a) for a in arrays]).data))

    errors = []
    for i in wrt:
        a = arrays[i]
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = objective()
            flat[j] = orig - step
            fm = objective()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * step)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        errors.append(_rel_error(analytic, numeric))
    return GradCheckReport(name or label, max(errors, default=0.0), tol, errors)


def _positive(rng, shape, lo=0.5):
    return lo + np.abs(rng.normal(shape))


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


# Sample inputs per registered op: rng -> (inputs, attrs).
OP_CASES: dict[str, Callable[[Rng], tuple[list[np.ndarray], dict]]] = {
    "add": lambda r: ([r.normal((3, 4)), r.normal((4,))], {}),
    "sub": lambda r: ([r.normal((3, 1)), r.normal((3, 4))], {}),
    "mul": lambda r: ([r.normal((2, 3, 4)), r.normal((3, 1))], {}),
    "div": lambda r: ([r.normal((3, 4)), _positive(r, (4,))], {}),
    "scale": lambda r: ([r.normal((5,))], {"c": -1.7}),
    "matmul": lambda r: ([r.normal((4, 4)), r.normal((4, 4))], {}),
    "einsum": lambda r: ([r.normal((2, 3, 4)), r.normal((2, 5, 4))], {"spec": "hld,hmd->hlm"}),
    "sum": lambda r: ([r.normal((3, 4, 2))], {"axis": 1, "keepdims": False}),
    "mean": lambda r: ([r.normal((3, 4, 2))], {"axis": (0, 2), "keepdims": True}),
    "reshape": lambda r: ([r.normal((3, 4))], {"shape": (2, 6)}),
    "transpose": lambda r: ([r.normal((2, 3, 4))], {"axes": (2, 0, 1)}),
    "cumsum": lambda r: ([r.normal((4, 3))], {"axis": 0}),
    "take": lambda r: ([r.normal((4, 3))], {"index": np.array([0, 2, 2, 3, 1]), "axis": 0}),
    "concat": lambda r: ([r.normal((2, 3)), r.normal((1, 3)), r.normal((3, 3))], {"axis": 0}),
    "softplus": lambda r: ([r.normal((3, 4), scale=3.0)], {}),
    "sigmoid": lambda r: ([r.normal((3, 4), scale=2.0)], {}),
    "relu": lambda r: ([_away_from_zero(r, (3, 4))], {}),
    "exp": lambda r: ([r.normal((3, 4))], {}),
    "softmax": lambda r: ([r.normal((3, 5))], {"mask": np.tril(np.ones((3, 5), dtype=bool), k=1)}),
    "layer_norm": lambda r: ([r.normal((3, 6)), r.normal((6,)), r.normal((6,))], {"eps": 1e-5}),
    "mean_square": lambda r: ([r.normal((3, 4))], {}),
    "depthwise_conv3d": lambda r: ([r.normal((3, 3, 4, 2)), r.normal((3, 3, 3, 2))], {"temporal": "causal"}),
    "rotate_pairs": lambda r: ([r.normal((5, 6))], {"cos": np.cos(a := r.normal((5, 3))), "sin": np.sin(a)}),
}


def check_registered_ops(tol: float = 1e-4, seeds=range(16), ops_filter=None) -> list[GradCheckReport]:
    """Run :func:`grad_check` for every checkable registered op over several seeds.

    The worst seed is reported per op. An op without a sample case fails outright.
    """
    reports = []
    for name, opdef in sorted(registered_ops().items()):
        if not opdef.checkable or (ops_filter is not None and name not in ops_filter):
            continue
        case = OP_CASES.get(name)
        if case is None:
            reports.append(GradCheckReport(name, float("inf"), tol))
            continue
        worst = None
        for seed in seeds:
            inputs, attrs = case(Rng(seed).child(name))
            rep = grad_check(opdef, inputs, tol, attrs=attrs, seed=seed)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        reports.append(worst)
    return reports


__all__ = ["GradCheckReport", "grad_check", "check_registered_ops", "OP_CASES", "ops"]
