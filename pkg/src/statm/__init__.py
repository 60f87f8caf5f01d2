"""Memory-buffered slot-based spatiotemporal attention for video.

Perception (slot attention over frame features), a FIFO slot memory, a
time-space transformer predictor with pluggable fusion and topology,
synthetic bouncing-sprite data, segmentation/quality metrics, and a CLI.
"""

from statm._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
