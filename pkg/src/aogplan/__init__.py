"""Task planning with temporal And-Or graph grammars and LSTM sequence models."""

__version__ = "0.1.0"
