"""romsynth: synthesis of optimal reduced-order models for planar walking."""

__version__ = "0.1.0"
