"""Maximum-probability control of a stochastic Dubins vehicle against a
pickup / dropoff / avoid temporal-logic task."""

__version__ = "0.1.0"
