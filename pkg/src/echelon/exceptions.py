"""Exception hierarchy shared by every stage of the toolkit."""


class EchelonError(Exception):
    """Base class for all errors raised by this package."""


class MalformedPe(EchelonError, ValueError):
    """The byte sequence is not a structurally sane PE file."""


class OffsetOutOfRange(EchelonError, IndexError):
    pass


class ShapeMismatch(EchelonError, ValueError):
    pass


class DegenerateDataset(EchelonError, ValueError):
    """A training set lacks one of the two classes."""


class DegenerateClass(EchelonError, ValueError):
    """A class needed downstream is missing (e.g. no malware left in B1)."""


class NoMalwareInValidation(EchelonError, ValueError):
    pass


class NoNegatives(EchelonError, ZeroDivisionError):
    pass


class NoPositives(EchelonError, ZeroDivisionError):
    pass


class EmptyDataset(EchelonError, ValueError):
    pass


class IoFailure(EchelonError, OSError):
    pass


class ModelFormatError(EchelonError, ValueError):
    """A serialized model document has an unknown schema or bad payload."""
