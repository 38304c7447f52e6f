"""Differential extrinsic plasticity and related rules in closed sensorimotor loops."""

__version__ = "0.1.0"
