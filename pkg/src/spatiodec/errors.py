"""Exception types shared across the package."""


class SpatiodecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpatiodecError):
    """Tensor extents are inconsistent with an operation's contract."""


class AxisError(SpatiodecError):
    """An axis index is out of range or repeated."""


class ContractError(SpatiodecError):
    """An operation was called outside of its declared contract."""


class DepthError(ShapeError):
    """Input extents are too small for the requested pooling depth."""


class DegenerateBatchError(ContractError):
    """Batch statistics were requested over a single element."""


class LabelError(SpatiodecError):
    """A class label is outside the valid range."""


class ConfigError(SpatiodecError):
    """A model or training configuration is internally inconsistent."""


class CheckpointError(SpatiodecError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class FormatError(SpatiodecError):
    """An on-disk volume or manifest file violates its format."""


class SplitError(SpatiodecError):
    """A cross-validation split cannot be constructed as requested."""


class PhantomSpecError(SpatiodecError):
    """A phantom specification is invalid (for example, a region escapes the volume)."""


class TransferError(SpatiodecError):
    """Source checkpoint tensors are incompatible with the target model body."""


class TrainingDivergedError(SpatiodecError):
    """Training produced a non-finite loss."""


class EvalError(SpatiodecError):
    """Evaluation was requested on an empty or inconsistent split."""
