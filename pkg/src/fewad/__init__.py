"""Few-shot industrial anomaly detection.

Core idea: a frozen contrastive vision-language backbone with a
value-value attention branch supplies global and local features; a
small bank of learnable prompt tokens is trained on k normal images to
yield normal/anomaly prototypes; prompt-guided scores fuse with a
nearest-neighbor patch memory for image- and pixel-level detection.

Library modules are imported explicitly (``fewad.pipeline``,
``fewad.metrics``, ...); the FastAPI app lives in ``fewad.service.app``
and the CLI entry point in ``fewad.cli``.
"""

from ._version import __version__

__all__ = ["__version__"]
