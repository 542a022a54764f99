"""Exception hierarchy shared by every role."""


class MPayError(Exception):
    """Base class for all package errors."""


class TokenFormatError(MPayError, ValueError):
    """A token (or one of its parts) failed structural validation.

    ``code`` is a short machine-readable tag such as ``BAD_MAGIC`` or
    ``TRUNCATED``.
    """

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


class GeoRangeError(MPayError, ValueError):
    pass


class ProvisioningError(MPayError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


class EnrollmentError(MPayError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


class FrameError(MPayError, ValueError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


class TransportError(MPayError):
    """Delivery failed at the transport layer. Callers may retry."""

    retryable = True


class PolicyError(MPayError, ValueError):
    pass


class ConfigError(MPayError, ValueError):
    pass
