"""Synthetic airway-flow images, GAN rebalancing and obstruction-site classification."""

CLASSES = ("left", "right", "both")

__version__ = "0.1.0"
