"""Robust conformal prediction regions for planning among uncontrolled agents."""
