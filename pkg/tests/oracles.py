"""Independent reference computations shared by the test modules.

These deliberately avoid the package's own code paths: the cell operator
below comes from doing the coherent-state window integrals in closed form
(erf factor in position, boxcar Fourier factor in momentum).
"""

import numpy as np
from scipy.special import erf


def closed_form_cell(x, dx, sigma, q1, q2, p1, p2):
    """Exact matrix of (1/2pi) int_cell |Z><Z| dQ dP sampled on the grid.

    Kernel(x, x') = (1/4pi) [erf((q2-xbar)/(s sqrt2)) - erf((q1-xbar)/(s sqrt2))]
                    * exp(-u^2 / (8 s^2)) * (e^{i p2 u} - e^{i p1 u}) / (i u)
    with u = x - x', xbar = (x + x')/2, then * dx for matrix convention.
    """
    xb = 0.5 * (x[:, None] + x[None, :])
    u = x[:, None] - x[None, :]
    qfac = erf((q2 - xb) / (sigma * np.sqrt(2))) - erf((q1 - xb) / (sigma * np.sqrt(2)))
    gfac = np.exp(-u * u / (8 * sigma * sigma))
    with np.errstate(divide="ignore", invalid="ignore"):
        efac = (np.exp(1j * p2 * u) - np.exp(1j * p1 * u)) / (1j * u)
    np.fill_diagonal(efac, p2 - p1)
    return (qfac * gfac * efac) * dx / (4 * np.pi)
