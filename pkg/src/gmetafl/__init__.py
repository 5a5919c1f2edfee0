"""Generalized meta federated learning: exact, first-order and Hessian-free
meta-gradient engines, a federated simulator and executable convergence
bounds."""

__version__ = "0.1.0"
