"""Finite-difference verification of the reverse-mode engine.

Central differences in float64 against the analytic gradients; the
relative-error denominator is floored so an exactly-zero pair compares
clean. Large leaves can be subsampled (seeded) to keep wall time down.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T


@dataclasses.dataclass
class GradCheckReport:
    passed: bool
    max_relative_error: float
    worst_leaf: int          # index into the leaves list
    worst_index: tuple       # flat element index within that leaf
    n_checked: int

    def __str__(self):
        state = "OK" if self.passed else "FAIL"
        return (f"gradcheck {state}: max_rel_err={self.max_relative_error:.3e} "
                f"at leaf {self.worst_leaf} elem {self.worst_index} "
                f"({self.n_checked} elements)")


def _run_scalar(f, leaves):
    out = f(*leaves)
    if not isinstance(out, T.Tensor) or out.size != 1:
        raise ValueError("gradcheck target must return a scalar Tensor")
    return out


def finite_diff_check(f, leaves, eps=1e-5, tol=1e-4, max_elems_per_leaf=None, seed=0):
    """Compare analytic grads of scalar `f(*leaves)` to central differences.

    Leaves must be float64 Tensors with requires_grad=True. Runs the
    forward twice first and insists on bit-identical outputs — a
    non-deterministic f makes the comparison meaningless.

    The quotient (f(x+eps) - f(x-eps)) / 2eps carries no signal below
    its cancellation floor of roughly |f| * ulp / eps, so elements whose
    analytic and numeric estimates both sit under that floor (times a
    safety margin) count as agreeing: they are zeros this eps cannot
    resolve, e.g. a bias that a downstream softmax cancels exactly.

    At the other extreme, normalization chains can bend the surface on a
    scale close to eps itself; there the base-step quotient is dominated
    by truncation error. Elements that miss `tol` are re-probed at
    smaller steps and pass only if the quotient converges to the
    analytic value. A wrong gradient stays wrong at every step size, so
    refinement cannot hide it.
    """
    for i, leaf in enumerate(leaves):
        if not leaf.requires_grad:
            raise ValueError(f"leaf {i} has requires_grad=False")
        if leaf.dtype != np.float64:
            raise ValueError(f"leaf {i} is {leaf.dtype}; finite differences need float64")

    y0 = _run_scalar(f, leaves).item()
    y1 = _run_scalar(f, leaves).item()
    if y0 != y1:
        raise ValueError("function is not deterministic; cannot finite-difference it")

    T.zero_grads(leaves)
    out = _run_scalar(f, leaves)
    T.backward(out)
    analytic = []
    for leaf in leaves:
        analytic.append(np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy())

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    worst_leaf, worst_index = -1, ()
    n_checked = 0
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems_per_leaf is not None and flat.size > max_elems_per_leaf:
            idxs = rng.choice(flat.size, size=max_elems_per_leaf, replace=False)
        aflat = analytic[li].reshape(-1)
        for k in idxs:
            orig = flat[k]
            ana = aflat[k]

            def probe(step):
                flat[k] = orig + step
                yp = _run_scalar(f, leaves).item()
                flat[k] = orig - step
                ym = _run_scalar(f, leaves).item()
                flat[k] = orig
                num = (yp - ym) / (2.0 * step)
                floor = abs(y0) * 256 * np.finfo(np.float64).eps / step
                if abs(ana) < floor and abs(num) < floor:
                    return 0.0
                return abs(ana - num) / max(abs(ana), abs(num), 1e-8)

            rel = probe(eps)
            for shrink in (8.0, 64.0, 512.0, 4096.0):
                if rel <= tol:
                    break
                rel = min(rel, probe(eps / shrink))
            n_checked += 1
            if rel > worst:
                worst = rel
                worst_leaf = li
                worst_index = np.unravel_index(int(k), leaf.shape)

    return GradCheckReport(
        passed=worst <= tol,
        max_relative_error=worst,
        worst_leaf=worst_leaf,
        worst_index=worst_index,
        n_checked=n_checked,
    )
