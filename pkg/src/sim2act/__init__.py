"""Calibrated latent simulators and perturbation-robust shipment policies."""

__version__ = "0.1.0"
