"""Classical channel analysis for a charged particle in a degree-zero homogeneous field."""

from . import channel, exceptional, fixedpoints, flow, geomodel, periodic, spiral
from .errors import NumericalFailure
from .periodic import (Antiderivative, FieldConfig, PeriodicFunction, antiderivative, bump_field,
                       check_noncritical, flux)

__version__ = "0.1.0"

__all__ = ["Antiderivative", "FieldConfig", "NumericalFailure", "PeriodicFunction", "antiderivative",
           "bump_field", "channel", "check_noncritical", "exceptional", "fixedpoints", "flow", "flux",
           "geomodel", "periodic", "spiral", "__version__"]
