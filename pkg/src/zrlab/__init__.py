"""Zero-range fluctuation laboratory.

Event-driven simulation of totally asymmetric zero-range dynamics under
weak-asymmetry scaling, with exact small-system generator algebra and the
statistical experiments that check the field-level limit ingredients.
"""

from .errors import ZrlabError
from .rates import LINEAR, QTASEP, RATE_FUNCTIONS, TANH, RateFunction
from .measure import SiteMarginal, sample_configuration, site_marginal, solve_fugacity
from .lattice import Configuration, CoupledQTasep
from .fields import ObserverBank, TestFunction, bump, fluctuation_field, gaussian

__version__ = "0.1.0"

__all__ = [
    "ZrlabError",
    "RateFunction",
    "RATE_FUNCTIONS",
    "QTASEP",
    "TANH",
    "LINEAR",
    "SiteMarginal",
    "site_marginal",
    "solve_fugacity",
    "sample_configuration",
    "Configuration",
    "CoupledQTasep",
    "TestFunction",
    "bump",
    "gaussian",
    "fluctuation_field",
    "ObserverBank",
    "__version__",
]
