"""mdnx: desk-scale monocular 3D object detection with depth-guided query anchors."""

__version__ = "0.1.0"
