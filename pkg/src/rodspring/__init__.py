"""rodspring: a spring-rod physics engine with linear-regression system identification."""
__version__ = "0.1.0"
