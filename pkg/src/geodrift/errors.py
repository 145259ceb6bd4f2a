"""Exception taxonomy for geodrift.

Every numerical failure mode raises a named subclass of GeodriftError so the
CLI can map failures to exit codes and record the error name in the run
manifest.
"""


class GeodriftError(Exception):
    """Base class for all geodrift numerical and validation errors."""


class ValidationError(GeodriftError):
    """A configuration or precondition constraint was violated."""


# -- surface geometry ---------------------------------------------------------

class DegenerateGradient(GeodriftError):
    """The level-set gradient vanished where a regular point was required."""


class NoConvergence(GeodriftError):
    """A Newton iteration failed to converge within its iteration budget."""


class NotTangent(GeodriftError):
    """A vector violated the tangency precondition grad_Q . v = 0."""


# -- integration --------------------------------------------------------------

class StepFailure(GeodriftError):
    """The adaptive integrator could not take a step (minimum step underflow)."""


class ChartExit(GeodriftError):
    """A trajectory left the Fermi chart's validity domain mid-excursion."""


# -- hyperbolic structures ----------------------------------------------------

class NewtonDiverged(GeodriftError):
    """Newton iteration for a periodic orbit diverged."""


class NotHyperbolic(GeodriftError):
    """A periodic orbit's leading multiplier is too close to the unit circle."""


class NoHomoclinicFound(GeodriftError):
    """The homoclinic shooting sweep produced no admissible intersection."""


class TangencySuspected(GeodriftError):
    """Stable/unstable traces intersect with angle below the configured floor."""


class FitFailed(GeodriftError):
    """An exponential tail fit has residual above its tolerance."""


class FrameDrift(GeodriftError):
    """Parallel-transported frame lost orthonormality beyond tolerance."""


# -- Fermi charts -------------------------------------------------------------

class OutsideChart(GeodriftError):
    """A point is outside the chart image (inverse Newton left the domain)."""


# -- perturbation -------------------------------------------------------------

class KappaVanishes(GeodriftError):
    """Normal curvature fell below the floor on the perturbation's support."""


# -- scattering ---------------------------------------------------------------

class LostChannel(GeodriftError):
    """A scattering excursion missed the homoclinic channel."""


class ProjectionFailed(GeodriftError):
    """Asymptotic projection onto the cylinder did not converge."""


# -- diffusion experiments ----------------------------------------------------

class EnergyFloor(GeodriftError):
    """Cylinder state fell below the minimum admissible speed."""


class SectionMiss(GeodriftError):
    """The flow failed to return to the Poincare section."""


class PhaseOutOfWindow(GeodriftError):
    """A scattering jump was requested outside the admissible phase window."""


class WindowUnreachable(GeodriftError):
    """Inner-map iteration could not reach the jump window."""


class TransversalityFailed(GeodriftError):
    """The foliation transversality bound was violated."""


class CaptureFailed(GeodriftError):
    """A guided excursion did not return near the cylinder within budget."""
