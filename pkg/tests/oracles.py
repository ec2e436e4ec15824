"""Reference implementations used only by the tests."""
import numpy as np
import scipy.linalg as sla


def random_qp_data(rng, n):
    """Strictly convex QP with a known feasible point; returns plain arrays."""
    M = rng.standard_normal((n, n))
    H = M @ M.T / n + 0.5 * np.eye(n)
    f = rng.standard_normal(n)
    n_eq = int(rng.integers(0, max(1, n // 3)))
    n_in = int(rng.integers(0, 2 * n))
    z0 = rng.standard_normal(n)
    A_eq = rng.standard_normal((n_eq, n))
    A_in = rng.standard_normal((n_in, n))
    b_in = A_in @ z0 + rng.uniform(0, 1, n_in)
    return H, f, A_eq, A_eq @ z0, A_in, b_in


def dual_projected_gradient(H, f, A_eq, b_eq, A_in, b_in, tol=1e-11, max_iter=200000):
    """Accelerated projected gradient ascent on the Lagrange dual.

    The dual variables of the inequalities live in the nonnegative orthant,
    so the projection is a clip.  Returns the primal point recovered from
    the dual iterate.
    """
    n = H.shape[0]
    A = np.vstack([A_eq.reshape(-1, n), A_in.reshape(-1, n)])
    b = np.concatenate([b_eq, b_in])
    n_eq = A_eq.shape[0]
    c = sla.cho_factor(H)
    Hinv_f = sla.cho_solve(c, f)
    if A.shape[0] == 0:
        return -Hinv_f
    Hinv_At = sla.cho_solve(c, A.T)
    K = A @ Hinv_At
    g0 = -(A @ Hinv_f) - b
    step = 1.0 / max(np.linalg.eigvalsh(K).max(), 1e-12)

    def proj(y):
        y = y.copy()
        y[n_eq:] = np.maximum(y[n_eq:], 0.0)
        return y

    y = np.zeros(A.shape[0])
    v = y.copy()
    t = 1.0
    for it in range(max_iter):
        grad = g0 - K @ v
        y_new = proj(v + step * grad)
        if np.dot(y_new - y, v - y_new) > 0:  # restart on non-monotone momentum
            t = 1.0
            v = y.copy()
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        v = y_new + (t - 1) / t_new * (y_new - y)
        dy = np.linalg.norm(y_new - y, np.inf)
        y, t = y_new, t_new
        if it % 50 == 0:
            z = -Hinv_f - Hinv_At @ y
            r_eq = np.abs(A_eq @ z - b_eq).max(initial=0.0)
            r_in = np.maximum(A_in @ z - b_in, 0.0).max(initial=0.0)
            comp = np.abs(y[n_eq:] * (A_in @ z - b_in)).max(initial=0.0)
            if max(r_eq, r_in, comp) < tol and dy < tol:
                break
    return -Hinv_f - Hinv_At @ y
