"""Load-altering attack simulation and rare-event sampling on Kron-reduced grids."""

__version__ = "0.1.0"
