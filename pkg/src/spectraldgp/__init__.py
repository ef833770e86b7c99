"""Deep Gaussian processes with spectral (RKHS Fourier feature) inducing variables."""

__version__ = "0.1.0"
