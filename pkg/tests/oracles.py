"""Independent reference computations used by several test modules."""

import numpy as np

from glyco.kalman import LinearGaussianModel


def random_model(rng: np.random.Generator, n: int) -> LinearGaussianModel:
    """Random stable-ish model with positive-definite Q and P0."""
    phi = rng.normal(0.0, 0.5, (n, n)) + np.eye(n) * 0.5
    A = rng.normal(size=(n, n))
    Q = A @ A.T * 0.3 + np.eye(n) * 0.05
    Bp = rng.normal(size=(n, n))
    P0 = Bp @ Bp.T + np.eye(n) * 0.1
    H = rng.normal(size=(1, n))
    R = np.array([[rng.uniform(0.2, 3.0)]])
    x0 = rng.normal(0.0, 2.0, n)
    return LinearGaussianModel(phi, H, Q, R, x0, P0)


def dense_map(model: LinearGaussianModel, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """MAP trajectory of the full linear-Gaussian system by one dense solve.

    Builds the (T n x T n) precision matrix of the negative log posterior
    (prior on x_0, transition terms, measurement terms for non-NaN y) and
    solves the normal equations.  Returns ``(means (T, n), covs (T, n, n))``
    where ``covs`` are the diagonal blocks of the inverse Hessian.
    """
    T, n = len(ys), model.dim
    N = T * n
    A = np.zeros((N, N))
    b = np.zeros(N)
    P0i = np.linalg.inv(model.P0)
    Qi = np.linalg.inv(model.Q)
    A[:n, :n] += P0i
    b[:n] += P0i @ model.x0
    for k in range(T - 1):
        # (x_{k+1} - phi x_k)^T Qi (x_{k+1} - phi x_k)
        i, j = slice(k * n, (k + 1) * n), slice((k + 1) * n, (k + 2) * n)
        A[i, i] += model.phi.T @ Qi @ model.phi
        A[i, j] -= model.phi.T @ Qi
        A[j, i] -= Qi @ model.phi
        A[j, j] += Qi
    h = model.H[0]
    r = model.R[0, 0]
    for k, y in enumerate(ys):
        if np.isnan(y):
            continue
        i = slice(k * n, (k + 1) * n)
        A[i, i] += np.outer(h, h) / r
        b[i] += h * y / r
    x = np.linalg.solve(A, b)
    cov = np.linalg.inv(A)
    blocks = np.stack([cov[k * n : (k + 1) * n, k * n : (k + 1) * n] for k in range(T)])
    return x.reshape(T, n), blocks


def central_difference(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (mutated in place, then restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference over the larger max-magnitude of the two (floored at 1e-8)."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def gradient_check(config, history: int, batch: int, seed: int, mode: str = "eval") -> dict[str, float]:
    """Per-tensor relative error of analytic vs central-difference gradients.

    Every parameter is redrawn from N(0, 0.5^2) so no ReLU sits exactly on
    its kink and the forget-gate bias does not saturate the cell.
    """
    from glyco.nn import backward, init_params, nll_loss, stacked_forward

    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    for arr in params.tensors.values():
        arr[...] = rng.normal(0.0, 0.5, arr.shape)
    x = rng.normal(size=(batch, history, config.input_size))
    y = rng.normal(size=batch)
    mask_seed = int(rng.integers(2**31))

    def loss():
        mu, s2, _ = stacked_forward(params, x, mode, mask_seed)
        return nll_loss(mu, s2, y)

    _, _, cache = stacked_forward(params, x, mode, mask_seed)
    analytic = backward(params, cache, y)
    return {
        name: rel_error(analytic[name], central_difference(loss, arr))
        for name, arr in params.items()
    }
