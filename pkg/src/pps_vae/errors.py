class PPSVAEError(Exception):
    """
    Base class for every error raised by the pps_vae package
    """


class ContractViolation(PPSVAEError, ValueError):
    """
    Raised when a numerical operation is called outside its preconditions, i.e. a non-positive temperature, a
    malformed one-hot vector or a context size that leaves no targets.
    """


class UsageError(PPSVAEError):
    """
    Raised for bad user input: unknown dataset or feature names, unknown configuration keys, invalid dimensions.
    """


class IngestionError(PPSVAEError):
    """
    Raised when dataset files are missing or cannot be decoded. The message names the offending file.
    """


class NonFiniteLossError(PPSVAEError):
    """
    Raised by the training loop when the objective stops being finite.
    """

    def __init__(self, term: str, step: int, checkpoint_path=None):
        self.term = term
        self.step = step
        self.checkpoint_path = checkpoint_path
        message = f'Non-finite loss at step {step} (offending term: {term})'
        if checkpoint_path is not None:
            message += f'; last good checkpoint is {checkpoint_path}'
        super().__init__(message)


class CheckpointIncompatibleError(PPSVAEError):
    """
    Raised when a checkpoint has the wrong magic bytes or an unsupported format version.
    """


class CheckpointIntegrityError(PPSVAEError):
    """
    Raised when a checkpoint file is truncated or its payload digest does not match.
    """
