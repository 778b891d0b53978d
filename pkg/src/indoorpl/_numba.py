"""Compiled kernels via numba."""

from numba import njit

__all__ = ["njit"]
