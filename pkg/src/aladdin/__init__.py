"""Left-atrial displacement, strain, atlas and function analysis from 3D cine volumes."""

__version__ = "0.1.0"
