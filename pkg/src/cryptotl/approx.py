"""Cubic ReLU approximation shared by the plaintext and encrypted paths."""

import numpy as np

# c3, c2, c1, c0 of c3*z**3 + c2*z**2 + c1*z + c0
RELU_APPROX_COEFFS = (-0.0061728, 0.092593, 0.59259, 0.49383)

# Inputs outside this interval are where the cubic stops tracking ReLU.
TRUSTED_RANGE = (-10.0, 10.0)


def relu_approx(z, coeffs=RELU_APPROX_COEFFS):
    c3, c2, c1, c0 = coeffs
    z = np.asarray(z, dtype=np.float64)
    return ((c3 * z + c2) * z + c1) * z + c0


def relu_approx_grad(z, coeffs=RELU_APPROX_COEFFS):
    c3, c2, c1, _ = coeffs
    z = np.asarray(z, dtype=np.float64)
    return (3.0 * c3 * z + 2.0 * c2) * z + c1
