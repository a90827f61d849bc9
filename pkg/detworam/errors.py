'''
This module contains the exceptions raised across detworam.

Every error derives from WoramError and from the builtin it specialises, so code
that already catches IndexError or ValueError keeps working.

'''


class WoramError(Exception):
    '''Base class for all detworam errors.'''


class IndexOutOfRange(WoramError, IndexError):
    pass


class SizeMismatch(WoramError, ValueError):
    pass


class IoFailure(WoramError, OSError):
    pass


class ContextReuse(WoramError, RuntimeError):
    '''A (epoch, index) counter pair was used twice under one key.'''


class PayloadTooLarge(WoramError, ValueError):
    pass


class MalformedPadding(WoramError, ValueError):
    pass


class AddressOutOfRange(WoramError, IndexError):
    pass


class InvalidGeometry(WoramError, ValueError):
    pass


class InfeasiblePacking(InvalidGeometry):
    pass


class CorruptPointer(WoramError, ValueError):
    pass


class PackOverflow(WoramError, ValueError):
    pass


class PayloadOverflow(WoramError, ValueError):
    pass


class GeometryMismatch(WoramError, ValueError):
    pass


class BadMagic(WoramError, ValueError):
    pass


class WrongKey(WoramError, ValueError):
    pass


class CorruptState(WoramError, ValueError):
    '''Superblock counters disagree with each other.'''
