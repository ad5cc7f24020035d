"""Memory-augmented prototype network for joint semantic and instance
segmentation of point clouds, at desk scale."""

__version__ = "0.1.0"
