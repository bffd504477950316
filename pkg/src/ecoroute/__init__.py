"""Fuel-aware vehicle routing.

Fuel models are Gaussian mixture regressions fitted by variational Bayes,
one per speed-limit category; routing runs exact all-to-one searches for
distance, time and fuel plus a soft time-budgeted eco search.
"""

__version__ = "0.1.0"
