"""Source label adaptation for semi-supervised domain adaptation, at desk scale."""

__version__ = "0.1.0"
