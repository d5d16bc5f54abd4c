"""Independent oracles: these implement the expected quantities by a route
separate from the library code they check (finite differences, closed-form
densities, a scalar optimizer re-implementation, Riccati recursion)."""

import math

import numpy as np


def numeric_gradient(f, param_data: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. an array mutated in place."""
    grad = np.zeros_like(param_data)
    it = np.nditer(param_data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = param_data[idx]
        param_data[idx] = old + eps
        fp = f()
        param_data[idx] = old - eps
        fm = f()
        param_data[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gaussian_log_density(x, mean, std) -> float:
    """Direct sum of univariate normal log densities."""
    x, mean, std = (np.asarray(v, dtype=np.float64) for v in (x, mean, std))
    return float(np.sum(-0.5 * ((x - mean) / std) ** 2 - np.log(std)
                        - 0.5 * math.log(2 * math.pi)))


def gaussian_kl_closed_form(mu_p, std_p, mu_q, std_q) -> float:
    mu_p, std_p, mu_q, std_q = (np.asarray(v, dtype=np.float64)
                                for v in (mu_p, std_p, mu_q, std_q))
    return float(np.sum(np.log(std_q / std_p)
                        + (std_p ** 2 + (mu_p - mu_q) ** 2) / (2 * std_q ** 2) - 0.5))


class ScalarAdam:
    """Reference Adam on a single scalar, written independently."""

    def __init__(self, w: float, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.w = w
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, grad: float) -> float:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        self.w -= self.lr * mhat / (math.sqrt(vhat) + self.eps)
        return self.w


def discounted_riccati(A, B, Q, R, gamma: float, iters: int = 10_000,
                       tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of the discounted discrete Riccati recursion.

    P = Q + gamma A'PA - gamma^2 A'PB (R + gamma B'PB)^-1 B'PA, with the
    optimal feedback K so that u* = -K x. Cost-to-go is x'Px.
    """
    A, B, Q, R = (np.asarray(v, dtype=np.float64) for v in (A, B, Q, R))
    P = Q.copy()
    for _ in range(iters):
        BtPB = R + gamma * B.T @ P @ B
        K = gamma * np.linalg.solve(BtPB, B.T @ P @ A)
        P_new = Q + gamma * A.T @ P @ A - gamma * A.T @ P @ B @ K
        if np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P = P_new
    BtPB = R + gamma * B.T @ P @ B
    K = gamma * np.linalg.solve(BtPB, B.T @ P @ A)
    return P, K


def lqr_rollout_cost(A, B, Q, R, x0, policy, steps: int, gamma: float,
                     terminal_P: np.ndarray) -> float:
    """Discounted quadratic cost of rolling a policy, with the Riccati
    cost-to-go closing the tail."""
    x = np.asarray(x0, dtype=np.float64).copy()
    cost = 0.0
    gpow = 1.0
    for _ in range(steps):
        u = policy(x)
        cost += gpow * float(x @ Q @ x + u @ R @ u)
        x = A @ x + B @ u
        gpow *= gamma
    return cost + gpow * float(x @ terminal_P @ x)
