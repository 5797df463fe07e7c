"""Brute-force posterior moments by trapezoid quadrature over x0.

Independent of the closed-form oracle: evaluates prior density times the
Gaussian likelihood of x_t on a dense grid and integrates directly.
"""

import numpy as np
from scipy.stats import multivariate_normal


def prior_density(gmm, pts):
    return sum(
        w * multivariate_normal(mean=m, cov=c).pdf(pts)
        for w, m, c in zip(gmm.weights, gmm.means, gmm.covs)
    )


def posterior_1d(gmm, a, b, x_t, lo=-10.0, hi=10.0, nodes=20001):
    x0 = np.linspace(lo, hi, nodes)
    dens = prior_density(gmm, x0[:, None]) * np.exp(-0.5 * ((x_t - a * x0) / b) ** 2)
    z = np.trapezoid(dens, x0)
    mean = np.trapezoid(x0 * dens, x0) / z
    var = np.trapezoid((x0 - mean) ** 2 * dens, x0) / z
    return mean, var


def posterior_2d(gmm, a, b, x_t, lo=-8.0, hi=8.0, nodes=801):
    g = np.linspace(lo, hi, nodes)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    like = np.exp(-0.5 * (((x_t[0] - a[0] * X) / b[0]) ** 2 + ((x_t[1] - a[1] * Y) / b[1]) ** 2))
    dens = prior_density(gmm, pts).reshape(X.shape) * like
    integ = lambda f: np.trapezoid(np.trapezoid(f, g, axis=1), g)  # noqa: E731
    z = integ(dens)
    mx = integ(X * dens) / z
    my = integ(Y * dens) / z
    vx = integ((X - mx) ** 2 * dens) / z
    vy = integ((Y - my) ** 2 * dens) / z
    return np.array([mx, my]), np.array([vx, vy])
