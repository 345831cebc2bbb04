"""Self-supervised MRI reconstruction with two parallel unrolled ISTA branches."""

__version__ = "0.1.0"
