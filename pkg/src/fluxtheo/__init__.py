"""Fluctuation theorems for quantum channels and an open-system annealing simulator."""
from . import ame, channels, experiment, feedback, fluctuation, measurements, quantum_core
from .quantum_core import DomainError, ValidationError

__version__ = "0.1.0"
