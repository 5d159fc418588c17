"""Exception hierarchy shared by every layer of the stack.

Each exception carries the process exit code the CLI maps it to.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3
EXIT_PROTOCOL = 4


class CipherDenoiseError(Exception):
    """Base class for all package errors."""

    exit_code: int = EXIT_USAGE


# Cryptosystem


class KeygenError(CipherDenoiseError):
    """Prime generation failed or injected primes are unusable."""


class DomainError(CipherDenoiseError):
    """A plaintext lies outside [0, n)."""


class MalformedCiphertextError(CipherDenoiseError):
    """A ciphertext is not an element of Z*_{n^2}."""


class KeyMismatchError(CipherDenoiseError):
    """Operands were produced under different public keys."""

    exit_code = EXIT_IO


class KeyFileError(CipherDenoiseError):
    """A key file is unreadable, unwritable or malformed."""

    exit_code = EXIT_IO


# Fixed-point codec


class EncodeOverflowError(CipherDenoiseError):
    """A real value does not fit in the signed half of Z_n."""


class OverflowBudgetError(CipherDenoiseError):
    """A model pipeline can outgrow the plaintext modulus."""

    def __init__(self, message: str, layer_index: int, required_bits: int) -> None:
        super().__init__(message)
        self.layer_index = layer_index
        self.required_bits = required_bits


# Tensors and models


class ShapeMismatchError(CipherDenoiseError):
    pass


class ScaleMismatchError(CipherDenoiseError):
    pass


class ModelFormatError(CipherDenoiseError):
    """A model file does not parse or is internally inconsistent."""

    exit_code = EXIT_IO


class TrainingError(CipherDenoiseError):
    pass


class ImageFormatError(CipherDenoiseError):
    exit_code = EXIT_IO


# Protocol


class ProtocolError(CipherDenoiseError):
    """A session failed; ``code`` is the u16 carried in ERROR frames."""

    exit_code = EXIT_PROTOCOL

    BAD_FRAME = 1
    ORDER = 2
    REFUSED = 3
    INTERNAL = 4
    REMOTE = 5

    def __init__(self, message: str, code: int = INTERNAL) -> None:
        super().__init__(message)
        self.code = code


class ProtocolOrderError(ProtocolError):
    """A message arrived that the session state machine does not expect."""

    def __init__(self, message: str) -> None:
        super().__init__(message, code=ProtocolError.ORDER)


class VerificationError(CipherDenoiseError):
    exit_code = EXIT_VERIFY


# Operator surface


class ConfigError(CipherDenoiseError):
    """A configuration file is unreadable or names an unknown option."""


class StorageError(CipherDenoiseError):
    """A file or directory cannot be read or written."""

    exit_code = EXIT_IO
