"""Full-spectrum Poisson unmixing for gamma-ray spectrometry."""

__version__ = "0.1.0"
