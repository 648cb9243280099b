"""Exception hierarchy shared by all specedit modules."""


class SpecEditError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(SpecEditError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(SpecEditError, ValueError):
    """A documented precondition was violated by the caller."""


class DataFormatError(SpecEditError, RuntimeError):
    """A file has the wrong magic bytes, version, or structure."""


class ChecksumError(DataFormatError):
    """Stored content hash does not match the payload."""
