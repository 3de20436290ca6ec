"""Salient object ranking with position-preserved pooling and attention,
trained and evaluated on procedurally generated ranked scenes."""

__version__ = "0.1.0"
