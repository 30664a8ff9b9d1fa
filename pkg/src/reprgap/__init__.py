"""Post-hoc generalization-gap prediction from representation quality."""

__version__ = "0.1.0"
