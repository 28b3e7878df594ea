"""Desk-scale face reenactment with deforming-autoencoder embedders and a conditional GAN."""
__version__ = "0.1.0"
