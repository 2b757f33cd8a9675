"""Laplacian-pyramid state-space image dehazing in pure numpy.

Submodules are imported on demand; ``import laplamba`` itself is cheap.
"""

__version__ = "0.1.0"
