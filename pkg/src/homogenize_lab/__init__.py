"""Monte Carlo laboratory for homogenization of advection equations in Gaussian random flows."""

from .config import ExperimentConfig, load_raw, validate
from .errors import ConfigError, FlowMonotonicityError, NumericQualityError
from .runner import ResultTable, run
from .spectral_field import SpectralMeasure, isotropic_shell, shear_measure

__all__ = [
    "ConfigError", "ExperimentConfig", "FlowMonotonicityError", "NumericQualityError", "ResultTable",
    "SpectralMeasure", "isotropic_shell", "load_raw", "run", "shear_measure", "validate",
]
__version__ = "0.1.0"
