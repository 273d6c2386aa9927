"""Joint law of an ergodic factor and a continuous-time perpetuity by diffusion time reversal."""

__version__ = "0.1.0"
