"""Shared instance factories for the test suite."""

import numpy as np

from qdescent.calibration import build_hessian
from qdescent.quantcore import ChannelProblem, owc_quantize


def random_problem(d_in, bits, seed, n=None, lambda_rel=0.01, grid_size=50, scale=1.0):
    """Random calibration Hessian + weight column, initialized by the grid search.

    Returns (problem, initial_codes). Weights are scaled so spans vary across
    instances; the Hessian is PSD with relative damping.
    """
    rng = np.random.default_rng(seed)
    n = n or 4 * d_in
    x = rng.standard_normal((n, d_in))
    hessian = build_hessian(x, lambda_rel)
    w = rng.standard_normal(d_in) * scale
    params, q0 = owc_quantize(w, hessian, bits, grid_size)
    prob = ChannelProblem.build(w, hessian, params)
    return prob, q0
