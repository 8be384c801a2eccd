"""FAMix: freeze, augment and mix for domain-generalized semantic segmentation."""

__version__ = "0.1.0"
