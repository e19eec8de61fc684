"""Desk-scale laboratory for representation dynamics of structured denoisers
on noisy mixtures of low-rank Gaussians."""

from . import analytic, dae, errors, metrics, molrg, probe, schedule

__all__ = ["analytic", "dae", "errors", "metrics", "molrg", "probe", "schedule"]

__version__ = "0.1.0"
