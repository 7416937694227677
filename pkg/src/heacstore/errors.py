"""Exception hierarchy shared by every layer, with stable wire codes."""


class HeacStoreError(Exception):
    code = 1


class SpanMismatch(HeacStoreError):
    code = 10


class LayoutMismatch(HeacStoreError):
    code = 11


class IndexOutOfRange(HeacStoreError):
    code = 20


class InvalidRange(HeacStoreError):
    code = 21


class InvalidLength(HeacStoreError):
    code = 22


class OutOfShareRange(HeacStoreError):
    code = 23


class AuthFailure(HeacStoreError):
    code = 30


class BeforeEpoch(HeacStoreError):
    code = 40


class MixedChunk(HeacStoreError):
    code = 41


class LateArrival(HeacStoreError):
    code = 42


class CorruptStream(HeacStoreError):
    code = 43


class OutOfOrder(HeacStoreError):
    code = 50


class MissingNode(HeacStoreError):
    code = 51


class UnalignedRange(HeacStoreError):
    code = 52


class BelowRetainedResolution(HeacStoreError):
    code = 53


class DuplicateStream(HeacStoreError):
    code = 60


class UnknownStream(HeacStoreError):
    code = 61


class NotOwner(HeacStoreError):
    code = 62


class UnknownPrincipal(HeacStoreError):
    code = 63


class ProtocolError(HeacStoreError):
    code = 64


class OutsideGrant(HeacStoreError):
    code = 70


class UnalignedForResolution(HeacStoreError):
    code = 71


class MissingEnvelope(HeacStoreError):
    code = 72


class UnalignedResolution(HeacStoreError):
    code = 73


class MissingGrant(HeacStoreError):
    code = 74


def _collect(cls, acc):
    for sub in cls.__subclasses__():
        acc[sub.code] = sub
        _collect(sub, acc)
    return acc


ERRORS_BY_CODE = _collect(HeacStoreError, {HeacStoreError.code: HeacStoreError})
