"""Musielak-Orlicz numerics and an Euler-Maruyama scheme for monotone
stochastic parabolic equations with Dirichlet boundary."""

__version__ = "0.1.0"
