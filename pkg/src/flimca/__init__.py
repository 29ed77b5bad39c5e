"""Multi-level cellular automata salient object detection on marker-learned encoders."""

__version__ = "0.1.0"
