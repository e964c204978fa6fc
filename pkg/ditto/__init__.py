# DiTTO: time-conditioned neural operators for time-dependent PDEs
__version__ = "0.3.0"
