"""Two-level demand-response control: models, delay stability, scheduling and a virtual testbed."""

__version__ = "0.1.0"
