"""Exception hierarchy shared by every fedchain module."""


class FedChainError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(FedChainError, ValueError):
    """An argument broke a documented precondition (shape, length, order)."""


class DivergenceError(FedChainError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite weights after training step {step}")


class ModelFormatError(FedChainError, ValueError):
    """Canonical model bytes could not be decoded."""


class IdxFormatError(FedChainError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class CryptoError(FedChainError):
    pass


class AuthenticationError(CryptoError):
    """AEAD tag check failed; no plaintext is released."""


class KeyAgreementError(CryptoError):
    pass


class DecryptionError(CryptoError):
    """Public-key (hybrid) decryption failed."""


class SignatureFormatError(CryptoError, ValueError):
    pass


class NonceReuseError(CryptoError):
    pass


class AggregationError(FedChainError):
    """Enclave aggregation aborted. ``cluster_id`` names the offending input, if any."""

    def __init__(self, message, cluster_id=None):
        self.cluster_id = cluster_id
        super().__init__(message)


class QuoteRefused(FedChainError):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"quote refused: {reason}")


class ChainFormatError(FedChainError):
    def __init__(self, message, height=None):
        self.height = height
        super().__init__(message)


class AppendRefused(FedChainError):
    pass


class IntegrityError(FedChainError):
    def __init__(self, height, cause):
        self.height = height
        self.cause = cause
        super().__init__(f"chain integrity failure at height {height}: {cause}")


class NotFoundError(FedChainError, LookupError):
    pass


class ConfigError(FedChainError, ValueError):
    pass
