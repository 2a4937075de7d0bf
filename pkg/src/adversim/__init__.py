"""Safety-critical traffic scenario generation via adversarial intention transfer."""

__version__ = "0.1.0"

from adversim.solver import solver_backend  # noqa: F401
