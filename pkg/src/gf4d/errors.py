"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class FormatError(ValueError):
    """A binary container or text record could not be parsed."""


class UndefinedResult(ValueError):
    """A metric has no defined value for the given inputs (e.g. empty mask)."""


class MissingInput(FileNotFoundError):
    """Required workspace slots are absent."""

    def __init__(self, missing):
        self.missing = list(missing)
        preview = ", ".join(self.missing[:20])
        more = "" if len(self.missing) <= 20 else f" (+{len(self.missing) - 20} more)"
        super().__init__(f"{len(self.missing)} missing input(s): {preview}{more}")


class TrainingAborted(RuntimeError):
    """Raised when a loss term becomes non-finite."""

    def __init__(self, term, checkpoint=None):
        self.term = term
        self.checkpoint = checkpoint
        msg = f"non-finite loss term '{term}'"
        if checkpoint is not None:
            msg += f"; diagnostic checkpoint written to {checkpoint}"
        super().__init__(msg)
