"""geodrift: geodesic flows on time-periodically fluctuating surfaces.

Numerical toolkit for constructing hyperbolic closed geodesics, transverse
homoclinics, Fermi charts, localized time-periodic surface perturbations,
first-order scattering maps, and finite-horizon energy-drift experiments.
"""

__version__ = "0.1.0"
