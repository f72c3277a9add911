"""Exception hierarchy shared by the library, service, and CLI.

InputError maps to HTTP 400 / exit code 1 (caller gave us something
unusable); everything else derived from FewadError maps to HTTP 500 /
exit code 2.
"""

from __future__ import annotations


class FewadError(Exception):
    """Base class for all errors raised by this package."""


class InputError(FewadError):
    """Bad user-supplied input: paths, configs, labels, prompt text."""


class StructuralError(FewadError):
    """Internal shape/contract violation between pipeline stages."""


class TrainingDivergedError(FewadError):
    """Loss became non-finite during prompt training."""

    def __init__(self, step: int, loss_trace: list[float]):
        self.step = step
        self.loss_trace = loss_trace
        super().__init__(f"training loss became non-finite at step {step}")
