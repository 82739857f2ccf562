"""Error types raised by simulator operations.

Every error carries a stable name (the class name) which is what traces,
scripts (``expect error=<Name>``) and attack scenarios refer to.
"""


class AcaiError(Exception):
    """Base class for all modelled failures."""

    @property
    def name(self) -> str:
        return type(self).__name__


# privilege / range
class NotRoot(AcaiError):
    pass


class OutOfRange(AcaiError):
    pass


class GpcDenied(AcaiError):
    pass


# realm management
class ResourceExhausted(AcaiError):
    pass


class WrongWorld(AcaiError):
    pass


class StillMapped(AcaiError):
    pass


class DoubleMap(AcaiError):
    pass


class IpaInUse(AcaiError):
    pass


class BarNotMapped(AcaiError):
    pass


class ConfigNotRealm(AcaiError):
    pass


class RealmActive(AcaiError):
    pass


class AttachIncomplete(AcaiError):
    pass


class NotOwner(AcaiError):
    pass


class Unmapped(AcaiError):
    pass


class UnknownVm(AcaiError):
    pass


class NotActive(AcaiError):
    pass


# monitor
class StreamIdTaken(AcaiError):
    pass


class DeviceNotFound(AcaiError):
    pass


class AttestFailed(AcaiError):
    pass


class VmAlreadyHasDevice(AcaiError):
    pass


class PaOwnedByOtherDevice(AcaiError):
    pass


class RealmStreamDenied(AcaiError):
    pass


class FieldDenied(AcaiError):
    pass


class AtsDenied(AcaiError):
    pass


# smmu / fabric
class DiscardedAtRootPort(AcaiError):
    pass


class NoSte(AcaiError):
    pass


class TranslationFault(AcaiError):
    pass


class NotBarRegion(AcaiError):
    pass


class RidInUse(AcaiError):
    pass


# harness
class UnknownScenario(AcaiError):
    pass


class ParseError(AcaiError):
    pass


class BudgetExceeded(AcaiError):
    pass


ERRORS = {
    cls.__name__: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, AcaiError) and cls is not AcaiError
}
