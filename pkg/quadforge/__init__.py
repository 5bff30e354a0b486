__version__ = "0.1.0"

from quadforge.models.bessel import BesselOrder
from quadforge.models.field import Grid, ScalarField
from quadforge.models.minimizer import EnergySpec, minimize
from quadforge.models.processor import Processor
from quadforge.models.radial import RadialParams, radial_solve
