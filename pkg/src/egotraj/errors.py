"""Exception hierarchy shared by all egotraj modules."""


class EgoTrajError(Exception):
    """Base class for every error raised by this package."""


class DegenerateInput(EgoTrajError, ValueError):
    """Point sets too small or too flat for a rigid fit."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RegistrationFailed(EgoTrajError):
    """Pairwise registration of frame ``t`` found too few correspondences."""

    def __init__(self, t, overlap=None):
        msg = f"registration failed at frame {t}"
        if overlap is not None:
            msg += f" (overlap fraction {overlap:.3f})"
        super().__init__(msg)
        self.t = t
        self.overlap = overlap


class NotARotation(EgoTrajError, ValueError):
    pass


class LengthMismatch(EgoTrajError, ValueError):
    pass


class DegenerateRot6D(EgoTrajError, ValueError):
    pass


class EmptyDataset(EgoTrajError, ValueError):
    pass


class DimMismatch(EgoTrajError, ValueError):
    pass


class InvalidSpec(EgoTrajError, ValueError):
    pass


class FormatError(EgoTrajError):
    """Malformed episode file; ``offset`` is the byte position where reading stopped."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ManifestCorrupt(EgoTrajError):
    pass


class MissingStats(EgoTrajError):
    pass
