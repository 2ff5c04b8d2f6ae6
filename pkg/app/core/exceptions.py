"""
Hierarquia de erros do laboratório.

O CLI mapeia: ConfigError -> 1, RemoteError -> 3, qualquer outro LabError -> 2.
"""


class LabError(Exception):
    """Base de todos os erros do pacote"""

    error_code = "LAB_ERROR"


class ConfigError(LabError):
    error_code = "CONFIG_ERROR"


class DimensionMismatchError(LabError):
    error_code = "DIMENSION_MISMATCH"


class NonFiniteError(LabError):
    error_code = "NON_FINITE"


class InvalidDistributionError(LabError):
    error_code = "INVALID_DISTRIBUTION"


class AlphabetError(LabError):
    error_code = "ALPHABET_ERROR"


class SequenceSpecError(LabError):
    error_code = "SEQUENCE_SPEC_ERROR"


class ModelConfigError(LabError):
    error_code = "MODEL_CONFIG_ERROR"


class PreconditionError(LabError):
    error_code = "PRECONDITION_FAILED"


class TrainingDivergedError(LabError):
    error_code = "TRAINING_DIVERGED"

    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class RemoteError(LabError):
    error_code = "REMOTE_ERROR"


class RemoteTransportError(RemoteError):
    error_code = "REMOTE_TRANSPORT"


class IncompatibleServerError(RemoteError):
    error_code = "INCOMPATIBLE_SERVER"


class AuthMissingError(RemoteError):
    error_code = "AUTH_MISSING"
