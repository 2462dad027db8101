"""Cross-domain presentation attack detection with a light MFM network in numpy."""

__version__ = "0.1.0"
