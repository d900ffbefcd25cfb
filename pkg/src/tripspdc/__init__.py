"""Three-mode parametric down-conversion: simulation, witness and calibration."""

__version__ = "0.1.0"
