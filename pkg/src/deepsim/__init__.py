"""Feature-space, adversarial and image-space losses for image generators."""

__version__ = "0.1.0"
