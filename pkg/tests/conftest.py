import numpy as np

from coreset_iht import SparseRegressionProblem


def random_problem(rng, s_dim, n, y_scale=1.0):
    phi = rng.standard_normal((s_dim, n))
    y = y_scale * rng.standard_normal(s_dim)
    return SparseRegressionProblem(phi, y)


def recovery_problem(rng, s_dim, n, k, value_range=(1.0, 5.0)):
    """Gaussian phi with a planted non-negative k-sparse solution (zero residual)."""
    phi = rng.standard_normal((s_dim, n))
    support = rng.choice(n, size=k, replace=False)
    w = np.zeros(n)
    w[support] = rng.uniform(*value_range, size=k)
    return SparseRegressionProblem(phi, phi @ w), w
