"""Sliding-window visual-inertial estimation with unobservable-subspace
auditing and alignment."""

__version__ = "0.1.0"
