"""Policy learning under stochastic sensor failures, with a from-scratch autodiff core."""

__version__ = "0.1.0"
