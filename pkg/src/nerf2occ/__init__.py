"""Transfer of a density radiance field into an occupancy field for
multi-view surface reconstruction, validated on synthetic analytic scenes."""

__version__ = "0.1.0"
