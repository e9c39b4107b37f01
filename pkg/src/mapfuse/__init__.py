"""mapfuse: merge structure-from-motion sub-maps via compressed residual
footprints, with statistical validation of each merge."""

__version__ = "0.1.0"
