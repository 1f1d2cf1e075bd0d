"""Neural-network proxies for AC-OPF with certified worst-case violation bounds."""

__version__ = "0.1.0"

from .grid import GridModel, AdmittanceSet, parse_case, build_admittances

__all__ = [
    "GridModel",
    "AdmittanceSet",
    "parse_case",
    "build_admittances",
    "__version__",
]
