"""Unpaired image translation with an activation-reconstruction loss, plus the
downstream augmentation/classification pipeline built around it."""

__version__ = "0.1.0"
