"""Error types shared across the package.

Plain ``ValueError`` is used for ordinary bad arguments (wrong shapes, empty
clouds, out-of-range scalars). The classes here cover failures that callers
may want to catch specifically.
"""


class CongruenceError(ValueError):
    """Two parameter sets disagree on names or shapes.

    The message lists every mismatch so a failed EMA or optimizer step can be
    diagnosed without a debugger.
    """


class NonDeterministicLossError(RuntimeError):
    """A loss callable returned different values on identical inputs.

    Raised by the finite difference checker, which needs repeatable forward
    evaluations to attribute differences to the perturbation alone.
    """


class CorruptFileError(ValueError):
    """A binary or manifest file failed validation. Always names the file."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class GenerationError(RuntimeError):
    """Synthetic data generation exhausted its retry budget."""
