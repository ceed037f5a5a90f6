"""Hot loops with numba and pure-numpy implementations."""
