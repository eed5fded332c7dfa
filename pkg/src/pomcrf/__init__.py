"""Multi-camera people localization by Mean-Field inference on an occupancy CRF."""

__version__ = "0.1.0"
