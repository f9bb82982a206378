"""Dense top-view LiDAR segmentation: pillars, ray-cast occupancy, multi-attention."""

__version__ = "0.1.0"
