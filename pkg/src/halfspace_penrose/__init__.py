"""Numerical checks for mass and horizon inequalities on asymptotically flat half-spaces.

Submodules:

* ``metric_core``: metrics, conformal factors, reference solutions
* ``tensor_calc``: curvature, hypersurface geometry, linearized scalar curvature
* ``mass_quadrature``: flux integrals at infinity with extrapolation
* ``doubling_glue``: collars, reflection doubles, seam smoothing
* ``elliptic_solver``: conformal repair and linear elliptic solves
* ``perturbations``: cutoff profiles and the boundary perturbation tensor
* ``penrose_verify``: horizons, areas, Penrose ratios
* ``cli_report``: command-line front end
"""

from .metric_core import *  # noqa: F401,F403
from .tensor_calc import *  # noqa: F401,F403
from .mass_quadrature import *  # noqa: F401,F403
from .doubling_glue import *  # noqa: F401,F403
from .elliptic_solver import *  # noqa: F401,F403
from .perturbations import *  # noqa: F401,F403
from .penrose_verify import *  # noqa: F401,F403

__version__ = "0.1.0"
