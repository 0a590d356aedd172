"""Exception hierarchy shared across the package."""


class DcsepError(Exception):
    """Base class for every error raised by dcsep."""


# compute core
class ShapeError(DcsepError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class InvalidDimension(DcsepError, ValueError):
    pass


class NonScalarLoss(DcsepError, ValueError):
    pass


class TapeReuse(DcsepError, RuntimeError):
    pass


class NonFiniteValue(DcsepError, ArithmeticError):
    pass


class NonFiniteGradient(DcsepError, ArithmeticError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


# data
class DataError(DcsepError):
    """Anything wrong with input data; the CLI maps these to exit code 2."""


class FormatError(DataError, ValueError):
    pass


class TruncatedFile(DataError, ValueError):
    pass


class LabelMismatch(DataError, ValueError):
    pass


class DegenerateDataset(DataError, ValueError):
    pass


class AlreadyNormalized(DataError, ValueError):
    pass


class InvalidGeometry(DataError, ValueError):
    pass


class LabelsRequired(DataError, ValueError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


# triplets
class NegativeNotFound(DcsepError):
    """No candidate passed the distance test; ``best_index`` is the fallback."""

    def __init__(self, best_index, tries):
        self.best_index = int(best_index)
        self.tries = tries
        super().__init__(
            f"no negative found in {tries} tries (best candidate {best_index})")


# training
class NonFiniteLoss(DcsepError, ArithmeticError):
    def __init__(self, term):
        self.term = term
        super().__init__(f"loss term {term} is not finite")


class TrainingDiverged(DcsepError, RuntimeError):
    def __init__(self, stage, epoch, batch, detail=""):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        msg = f"training diverged in {stage} at epoch {epoch}, batch {batch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DegenerateEmbedding(DcsepError, ValueError):
    pass


class ConfigError(DcsepError, ValueError):
    pass
