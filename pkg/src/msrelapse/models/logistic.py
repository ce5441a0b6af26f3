"""L2-penalized logistic regression fitted by damped Newton iterations.

Objective (summed, not averaged, over samples)::

    loss = sum_i log(1 + exp(-s_i z_i)) + ||w||^2 / (2C),   z_i = w.x_i + b,  s_i = 2y_i - 1

The intercept ``b`` is not penalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class ConvergenceError(RuntimeError):
    def __init__(self, n_iter: int, grad_norm: float):
        super().__init__(f"logistic fit did not converge after {n_iter} iterations "
                         f"(|grad|_inf = {grad_norm:.3e})")
        self.n_iter = n_iter
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    C: float
    n_iter: int = 0
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return {"kind": "logistic", "C": self.C, "intercept": self.intercept,
                "weights": [float(w) for w in self.weights]}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(np.array(d["weights"], dtype=float), float(d["intercept"]), float(d["C"]))


def _check(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("logistic regression needs finite inputs")
    return X, y


def logistic_objective(weights, intercept, X, y, C) -> tuple[float, np.ndarray]:
    """Penalized negative log-likelihood and its gradient ``[d/dw..., d/db]``."""
    X, y = _check(X, y)
    w = np.asarray(weights, dtype=float)
    if not (np.all(np.isfinite(w)) and np.isfinite(intercept)):
        raise ValueError("non-finite parameters")
    s = 2.0 * y - 1.0
    z = X @ w + intercept
    loss = float(np.sum(np.logaddexp(0.0, -s * z)) + (w @ w) / (2.0 * C))
    r = expit(z) - y
    grad = np.append(X.T @ r + w / C, r.sum())
    return loss, grad


def train_logistic(X, y, C: float, tol: float = 1e-8, max_iter: int = 1000) -> LogisticModel:
    """Minimize the penalized loss from zero until ``|grad|_inf < tol``."""
    X, y = _check(X, y)
    if X.shape[0] < 2 or np.unique(y).size < 2:
        raise ValueError("logistic regression needs both classes")
    n, p = X.shape
    Xa = np.column_stack([X, np.ones(n)])
    ridge = np.full(p + 1, 1.0 / C)
    ridge[-1] = 0.0
    theta = np.zeros(p + 1)
    loss, grad = logistic_objective(theta[:-1], theta[-1], X, y, C)
    gnorm = float(np.max(np.abs(grad)))
    for it in range(1, max_iter + 1):
        if gnorm < tol:
            return LogisticModel(theta[:-1].copy(), float(theta[-1]), C, it - 1, gnorm)
        q = expit(Xa @ theta)
        H = (Xa * (q * (1.0 - q))[:, None]).T @ Xa + np.diag(ridge)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        slope = float(grad @ step)
        while True:
            cand = theta - t * step
            new_loss, new_grad = logistic_objective(cand[:-1], cand[-1], X, y, C)
            if new_loss <= loss - 1e-4 * t * slope or t < 1e-10:
                break
            # near the optimum the loss change drowns in rounding; trust the gradient
            if new_loss <= loss + 1e-12 * abs(loss) and np.max(np.abs(new_grad)) < gnorm:
                break
            t *= 0.5
        theta, loss, grad = cand, new_loss, new_grad
        gnorm = float(np.max(np.abs(grad)))
    if gnorm < tol:
        return LogisticModel(theta[:-1].copy(), float(theta[-1]), C, max_iter, gnorm)
    raise ConvergenceError(max_iter, gnorm)


def predict_proba_logistic(model: LogisticModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.weights.size:
        raise ValueError(f"expected {model.weights.size} columns, got {X.shape[-1]}")
    return expit(X @ model.weights + model.intercept)
