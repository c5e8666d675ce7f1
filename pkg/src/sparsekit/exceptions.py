"""Exception hierarchy shared by all sparsekit modules."""


class SparsekitError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(SparsekitError, ValueError):
    """Tensor shapes do not agree with what an operation expects."""


class UnsupportedLayerError(SparsekitError, ValueError):
    pass


class StructureError(SparsekitError, ValueError):
    """The layer chain cannot be transformed as requested (e.g. orphan batchnorm)."""


class BundleError(SparsekitError):
    """A model bundle on disk is malformed."""


class TensorFileError(BundleError):
    pass


class MissingTensorError(TensorFileError):
    pass


class ByteCountError(TensorFileError):
    pass


class DuplicateLayerError(BundleError):
    pass


class NumericError(SparsekitError, ArithmeticError):
    """Non-finite values appeared where finite ones are required.

    ``last_state`` carries the most recent finite object when the raising
    routine had one (e.g. a layer during fine-tuning).
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class ConfigError(SparsekitError, ValueError):
    pass


class DataError(SparsekitError, ValueError):
    pass


class GenerationError(SparsekitError, RuntimeError):
    """Synthetic data generation gave up (rejection cap or divergent system)."""


class PipelineStageError(SparsekitError):
    """Wraps a failure inside :func:`run_pipeline` with its stage and iteration."""

    def __init__(self, stage, iteration, cause):
        super().__init__(f"stage {stage!r} failed at iteration {iteration}: {cause}")
        self.stage = stage
        self.iteration = iteration
        self.cause = cause
