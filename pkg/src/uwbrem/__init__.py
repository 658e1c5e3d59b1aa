"""UWB range-error mitigation: CIR regression, int8 inference, trilateration."""

__version__ = "0.1.0"
