"""Robust NMPC toolkit: controllers, vehicle model, ellipsoidal uncertainty
propagation, track generation and a closed-loop simulator."""

__version__ = "0.1.0"
