"""Transit signal priority by cooperative-game Q-learning on a two-class CTM."""

__version__ = "0.1.0"
