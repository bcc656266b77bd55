"""Coupled chemo-mechanical phase-field fracture of lithiating electrodes."""

__version__ = "0.1.0"
