"""Road-traffic crash detection from fixed-camera video and vehicle detections."""

__version__ = "0.1.0"

WORKING_RESOLUTION = (480, 360)
