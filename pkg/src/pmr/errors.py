"""Exception types raised across the package."""


class PMRError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(PMRError, ValueError):
    pass


class DegenerateDistribution(PMRError, ValueError):
    pass


class LengthMismatch(PMRError, ValueError):
    pass


class SupportMismatch(PMRError, ValueError):
    pass


class GameTooLong(PMRError):
    """Scripted dialog failed to isolate the target within the round budget."""


class EnumerationTooLarge(PMRError):
    pass


class ConfigInvalid(PMRError, ValueError):
    pass


class MissingDataset(PMRError, FileNotFoundError):
    pass


class MissingCheckpoint(PMRError, FileNotFoundError):
    pass


class CorruptRecord(PMRError, ValueError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason
