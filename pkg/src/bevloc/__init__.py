"""LiDAR-only 3-DOF localization against compact BEV raster prior maps."""
__version__ = "0.1.0"
