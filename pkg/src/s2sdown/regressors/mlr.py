"""Per-gridpoint multiple linear regression: every output gridpoint regresses on all inputs."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from ..grid import DimensionError
from .layers import Module


class SingularSystemError(np.linalg.LinAlgError):
    pass


class MlrModel(Module):
    kind = "mlr"

    def __init__(self, n_in: int, n_out: int, beta=None, beta0=None):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params["beta"] = np.zeros((n_out, n_in)) if beta is None else np.array(beta, dtype=np.float64)
        self.params["beta0"] = np.zeros(n_out) if beta0 is None else np.array(beta0, dtype=np.float64)
        self.no_decay.add("beta0")
        if self.params["beta"].shape != (n_out, n_in) or self.params["beta0"].shape != (n_out,):
            raise DimensionError("MLR coefficient shapes do not match (n_out, n_in)")
        self._x = None

    @property
    def beta(self) -> np.ndarray:
        return self.params["beta"]

    @property
    def beta0(self) -> np.ndarray:
        return self.params["beta0"]

    def config(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if x.shape[1] != self.n_in:
            raise DimensionError(f"MLR expects {self.n_in} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.beta.T + self.beta0

    def backward(self, grad_out: np.ndarray) -> None:
        self.grads["beta"] = grad_out.T @ self._x
        self.grads["beta0"] = grad_out.sum(axis=0)


def ridge_lambda(weight_decay: float, n_samples: int, n_out: int) -> float:
    """Ridge penalty equivalent to MSE + (wd / 2) * ||beta||^2 averaged over samples and outputs."""
    return 0.5 * weight_decay * n_samples * n_out


def mlr_fit_closed_form(X: np.ndarray, Y: np.ndarray, lam: float = 0.0) -> MlrModel:
    """Minimize ||Y_g - beta0_g - X beta_g||^2 + lam ||beta_g||^2 for every output g.

    The intercept is not penalized. Solved via Cholesky on the centred normal
    equations, with a pseudo-inverse fallback when lam > 0.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionError(f"X {X.shape} and Y {Y.shape} must be (T, G_in) and (T, G_out)")
    if X.shape[0] < 2:
        raise ValueError("MLR fit needs T > 1")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    A = Xc.T @ Xc
    A[np.diag_indices_from(A)] += lam
    B = Xc.T @ Yc
    if lam == 0.0:
        ev = np.linalg.eigvalsh(A)
        if ev[0] <= 1e-12 * max(ev[-1], 1.0):
            raise SingularSystemError("normal matrix is singular; use a ridge penalty lam > 0")
    try:
        beta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), B).T
    except np.linalg.LinAlgError:
        beta = (np.linalg.pinv(A) @ B).T
    return MlrModel(X.shape[1], Y.shape[1], beta, ym - beta @ xm)


def mlr_fit_gradient_descent(X: np.ndarray, Y: np.ndarray, lam: float, tol: float = 1e-12,
                             max_iter: int = 200_000) -> MlrModel:
    """Accelerated full-batch gradient descent on the same ridge objective (iterative reference)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    T, n_in = X.shape
    Xa = np.hstack([np.ones((T, 1)), X])
    pen = np.full(n_in + 1, lam)
    pen[0] = 0.0
    H = Xa.T @ Xa
    lipschitz = 2.0 * (np.linalg.eigvalsh(H)[-1] + lam)
    step = 1.0 / lipschitz
    XtY = Xa.T @ Y

    def grad(W):
        return 2.0 * (H @ W - XtY) + 2.0 * pen[:, None] * W

    W = np.zeros((n_in + 1, Y.shape[1]))
    Z, t = W.copy(), 1.0
    for _ in range(max_iter):
        W_new = Z - step * grad(Z)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # restart momentum when it stops helping
        if np.sum((W_new - W) * (Z - W_new)) > 0:
            Z, t_new = W_new.copy(), 1.0
        else:
            Z = W_new + ((t - 1.0) / t_new) * (W_new - W)
        W, t = W_new, t_new
        if np.max(np.abs(grad(W))) < tol * max(1.0, np.max(np.abs(XtY))):
            break
    return MlrModel(n_in, Y.shape[1], W[1:].T, W[0])
