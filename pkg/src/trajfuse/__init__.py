"""Two-stream convolutional human motion prediction with temporal fusion."""

__version__ = "0.1.0"
