"""maxkit: boundary-integral forward synthesis and low-frequency inverse
recovery for the time-harmonic Maxwell system with an interior current
source on layered balls."""

__version__ = "0.1.0"
