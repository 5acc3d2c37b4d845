"""Action detection with attention over spatiotemporal context, in numpy."""

__version__ = "0.1.0"
