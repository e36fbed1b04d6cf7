"""Stereo-guided training of a monocular BEV 3D detector at desk scale.

Submodules are imported on demand; importing the package itself loads
nothing heavy, so the command line tool can set thread limits first.
"""

__version__ = "0.1.0"
