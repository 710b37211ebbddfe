"""Support decomposition variational inference for programs with stochastic support."""

__version__ = "1.0.0"
