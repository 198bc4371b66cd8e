"""Learning separable Hamiltonians from sparse, noisy trajectory data.

Submodules are imported on demand; importing the package itself stays
free of numpy so the command line can cap BLAS threads first.
"""

__version__ = "0.1.0"
