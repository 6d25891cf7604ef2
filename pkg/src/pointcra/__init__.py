"""Channel-level relation-attentive aggregation for point clouds."""

__version__ = "0.1.0"
