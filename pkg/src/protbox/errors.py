"""Exception hierarchy for the protbox engine."""


class ProtboxError(Exception):
    """Base class for all protbox errors."""


# codec
class MalformedEncoding(ProtboxError):
    """Encoded name is not valid modified-Base64."""


class BadPadding(ProtboxError):
    """Decryption produced invalid padding or a non-UTF-8 name (wrong key)."""


class InvalidName(ProtboxError):
    """Cleartext name is empty, not UTF-8, or contains a path separator."""


# crypto
class UnsupportedAlgorithm(ProtboxError):
    """Algorithm spec names a cipher/mode/MAC outside the supported set."""


class IntegrityFailure(ProtboxError):
    """MAC verification failed; the blob is tampered or keyed differently."""


class WeakParameters(ProtboxError):
    """KDF parameters below the safety floor."""


class WrongPassword(ProtboxError):
    """Sealed registry MAC mismatch under the derived key."""


class UnsupportedVersion(ProtboxError):
    """Sealed container has an unknown magic or version."""


# registry
class CorruptRegistry(ProtboxError):
    """Registry opened fine but failed structural validation."""


class SharedFolderAlreadyPaired(ProtboxError):
    pass


class NestedPaths(ProtboxError):
    pass


class NotADirectory(ProtboxError):
    pass


class AlreadyHidden(ProtboxError):
    pass


class NoSuchVersion(ProtboxError):
    pass


class NothingToRestore(ProtboxError):
    pass


class CaseCollision(ProtboxError):
    """Two encoded names collide on a case-insensitive filesystem."""


# identity
class MissingField(ProtboxError):
    pass


class SigningRefused(ProtboxError):
    """Token absent or the user declined the PIN prompt."""


class BadSignature(ProtboxError):
    pass


class UntrustedChain(ProtboxError):
    pass


class ExpiredCertificate(ProtboxError):
    pass


class BrokenChain(ProtboxError):
    pass


# keydist
class FolderReadOnly(ProtboxError):
    """Shared folder rejects writes (read-only cloud share)."""


class ApprovalDenied(ProtboxError):
    pass


class MalformedPackage(ProtboxError):
    """Key package decrypted but fails validation; carries responder identity."""

    def __init__(self, message, responder=None):
        super().__init__(message)
        self.responder = responder


class UnknownRequest(ProtboxError):
    pass


# sync
class FolderUnreadable(ProtboxError):
    pass


class RenameCollision(ProtboxError):
    pass
