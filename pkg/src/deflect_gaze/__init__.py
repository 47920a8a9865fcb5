"""Deflectometric eye tracking on synthetic data.

Two estimation methods over the same simulated scene: single-shot stereo
deflectometry with normal back-tracing, and optimization-based inverse
rendering of the eye pose.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    bench,
    decode,
    errors,
    gaze,
    geometry,
    imagefiles,
    optimize,
    render,
    scene,
    stereo,
)
