"""Desk-scale droplet collision imaging toolkit.

Simulates binary droplet collisions with a phase-field two-phase flow
model, renders sparse two-view X-ray transmission datasets from the
resulting movies, fits a physics-informed neural field to those
projections, and scores reconstructions against ground truth.
"""

__version__ = "0.1.0"

from .core import DomainSpec, FlowState, MaterialPair, Movie4D, ScalarField3

__all__ = ["DomainSpec", "FlowState", "MaterialPair", "Movie4D", "ScalarField3",
           "__version__"]
