"""Topology optimization of incompressible surface flows on offset 2-manifolds."""

__version__ = "0.1.0"
