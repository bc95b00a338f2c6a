"""Unsupervised identification of hyperelastic laws with input-convex networks.

Full-field displacements and boundary reaction forces go in; a physics-consistent
strain energy network comes out.
"""
import jax

# every module relies on double precision (patch tests, FD oracles, Newton tolerances)
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
