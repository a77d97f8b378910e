"""Exception types shared across the package.

``ValueError`` (and argparse errors) signal misuse of the API or CLI;
``NumericalError`` signals a runtime numerical failure (underflow,
divergence, bracket overflow).  The CLI maps the former to exit code 1
and the latter to exit code 2.
"""


class NumericalError(RuntimeError):
    """A computation failed for numerical reasons."""


class TrainingDiverged(NumericalError):
    """Optimization produced a non-finite loss.

    Carries the per-epoch trace accumulated before the failure in
    ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
