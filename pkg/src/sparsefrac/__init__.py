"""Spatially sparse, time-dependent optimization with fractional Sobolev regularity."""
