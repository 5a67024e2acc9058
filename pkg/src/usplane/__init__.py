"""Toolkit for localizing 2D cross-sectional slices in a 3D volume.

Plane poses are parameterized by three corner anchor points in the voxel
frame of a reference (atlas) volume. A small convolutional regressor is
trained on slices sampled from that volume, adapted to unlabeled image
sequences with a cycle-consistency loss over composed displacements, and
evaluated geometrically. A coordinate-based implicit field provides the
companion reconstruction path.
"""

__version__ = "0.1.0"
