"""Phase-aware speech enhancement across STFT frame lengths."""

__version__ = "0.1.0"
