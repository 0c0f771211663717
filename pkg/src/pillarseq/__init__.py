"""Temporal pillar-based lidar object detection with frame-skipping augmentation."""

__version__ = "0.1.0"
