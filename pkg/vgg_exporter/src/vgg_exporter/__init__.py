"""One-shot exporter of VGG19 fc6 activations to SRFT feature files."""

__version__ = "0.1.0"
