
"""Differentiable implicit MPM for geomechanics"""

__version__ = "1.0.0"
__author__ = "vergotten"
