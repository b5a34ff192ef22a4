"""hexsynth: six-voice differentiable guitar synthesis from string-wise MIDI."""

__version__ = "0.1.0"
