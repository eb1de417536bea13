"""Lyapunov-aware transfer of learned transition models between similar systems."""

from .lyapunov import LyapunovSpectrum, composite_spectrum, estimate_spectrum, theorem1_bound
from .net import Mlp
from .systems import generate_dataset, make_system, perturb_system
from .transfer import TransferMethod, TransferredModel, fit_transfer

__version__ = "0.1.0"

__all__ = ["LyapunovSpectrum", "Mlp", "TransferMethod", "TransferredModel", "composite_spectrum",
           "estimate_spectrum", "fit_transfer", "generate_dataset", "make_system", "perturb_system",
           "theorem1_bound"]
