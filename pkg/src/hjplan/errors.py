"""Exception types shared across the package."""


class SolverDivergedError(RuntimeError):
    """Grid solver produced NaN/Inf; carries the offending backward time."""

    def __init__(self, time: float, message: str = ""):
        self.time = time
        super().__init__(message or f"non-finite values while stepping at t={time:.6g}")


class TrainingDivergedError(RuntimeError):
    """Training loss or parameters became non-finite."""


class FileFormatError(ValueError):
    """Container file has a bad magic number or unreadable header."""


class HeaderError(FileFormatError):
    """Header parsed but its contents are malformed."""


class ShapeMismatchError(FileFormatError):
    """Payload shape disagrees with the header."""


class TruncatedBlobError(FileFormatError):
    """Binary payload shorter than the header promises."""


class SystemMismatchError(ValueError):
    """Two artifacts were built for different system configurations."""


class ScenarioInfeasibleError(RuntimeError):
    """Rejection sampling could not place collision-free agents."""


class MemoryRefusedError(RuntimeError):
    """Estimated memory exceeds the configured cap; carries the estimate."""

    def __init__(self, required_bytes: int, cap_bytes: int):
        self.required_bytes = required_bytes
        self.cap_bytes = cap_bytes
        super().__init__(
            f"estimated {required_bytes / 1e9:.2f} GB exceeds cap {cap_bytes / 1e9:.2f} GB"
        )
