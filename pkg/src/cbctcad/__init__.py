"""Cone-beam CT simulation, denoising and sinus diagnosis pipeline."""
__version__ = "0.1.0"
