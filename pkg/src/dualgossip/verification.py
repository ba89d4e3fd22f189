"""Independent numerical oracles used by the test suite.

Everything here deliberately avoids the production code paths: gradients are
checked by central differences, eigenvalues by cyclic Jacobi sweeps (the
production spectral routine uses power iteration), and averaging by plain
Python accumulation. Test-only; nothing in the package imports this module.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import InvalidInputError, NumericalFailure


@dataclass(frozen=True)
class FiniteDiffSpec:
    """Parameters for central-difference gradient checks."""

    step: float = 1e-5
    rel_tolerance: float = 1e-5
    magnitude_floor: float = 1e-8

    def __post_init__(self):
        if self.step <= 0:
            raise InvalidInputError("finite-difference step must be positive")
        if self.rel_tolerance <= 0:
            raise InvalidInputError("tolerance must be positive")


def finite_diff_grad(fn, params, spec=FiniteDiffSpec()):
    """Central-difference gradient of a scalar function of a flat vector.

    ``fn`` must accept a 1-d float array and return a finite float at every
    probe point ``params +- step * e_i``.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        probe = params.copy()
        probe[i] = params[i] + spec.step
        f_plus = fn(probe)
        probe[i] = params[i] - spec.step
        f_minus = fn(probe)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericalFailure(
                f"non-finite loss probing coordinate {i}", iterations=i
            )
        grad[i] = (f_plus - f_minus) / (2.0 * spec.step)
    return grad


def grads_agree(analytic, numeric, spec=FiniteDiffSpec()):
    """Per-coordinate relative comparison with a magnitude floor.

    Coordinates where both gradients are below the floor are skipped;
    elsewhere the relative error must be under ``spec.rel_tolerance``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        return False
    for a, n in zip(analytic.ravel(), numeric.ravel()):
        scale = max(abs(a), abs(n))
        if scale <= spec.magnitude_floor:
            continue
        if abs(a - n) / scale > spec.rel_tolerance:
            return False
    return True


def jacobi_eigenvalues(matrix, off_diag_tol=1e-12, max_sweeps=100):
    """All eigenvalues of a small symmetric matrix by cyclic Jacobi sweeps.

    Rotations are applied until the off-diagonal Frobenius norm falls below
    ``off_diag_tol``. Restricted to n <= 32.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError("matrix must be square")
    n = a.shape[0]
    if n > 32:
        raise InvalidInputError(f"oracle limited to n <= 32, got {n}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-12 * scale:
        raise InvalidInputError("matrix is not symmetric")
    if n == 1:
        return np.array([a[0, 0]])

    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off < off_diag_tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < off_diag_tol / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    else:
        raise NumericalFailure(
            "Jacobi sweeps did not reduce off-diagonal norm", iterations=max_sweeps
        )
    return np.diag(a).copy()


def dense_second_eigenvalue(matrix, off_diag_tol=1e-12, max_sweeps=100):
    """Second-largest-magnitude eigenvalue of a small symmetric matrix;
    oracle for the power-iteration spectral gap."""
    eigenvalues = sorted(
        jacobi_eigenvalues(matrix, off_diag_tol, max_sweeps), key=abs, reverse=True
    )
    if len(eigenvalues) < 2:
        raise InvalidInputError("second eigenvalue needs at least a 2x2 matrix")
    return float(eigenvalues[1])


def centralized_average_oracle(adapters):
    """Exact coordinatewise mean, accumulated in plain Python.

    The production gossip path multiplies by a mixing matrix; this keeps an
    arithmetic route with no shared code.
    """
    if len(adapters) == 0:
        raise InvalidInputError("need at least one adapter")
    first = np.asarray(adapters[0], dtype=np.float64)
    for other in adapters[1:]:
        if np.asarray(other).shape != first.shape:
            raise InvalidInputError("adapters must share one shape")
    n = len(adapters)
    flat = [np.asarray(a, dtype=np.float64).ravel() for a in adapters]
    out = np.empty(first.size, dtype=np.float64)
    for i in range(first.size):
        out[i] = math.fsum(vec[i] for vec in flat) / n
    return out.reshape(first.shape)
