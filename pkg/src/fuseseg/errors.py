"""Exception hierarchy shared across the package.

Three base classes partition failures by how the CLI reports them:
ConfigError exits 2, DataError exits 3, RuntimeFailure exits 4.
"""


class FusesegError(Exception):
    """Base class for all package errors."""


class ConfigError(FusesegError):
    """Invalid or missing configuration (CLI exit code 2)."""


class DataError(FusesegError):
    """Invalid, missing, or inconsistent data (CLI exit code 3)."""


class RuntimeFailure(FusesegError):
    """Environment or numerical failure at run time (CLI exit code 4)."""


# --- volume I/O ---

class MissingHeader(DataError):
    """Sidecar header absent or unreadable."""


class ShapeMismatch(DataError):
    """Grid shapes disagree (header vs blob, or across paired grids)."""


class NonFiniteData(DataError):
    """NaN or Inf encountered where finite values are required."""


class IOFailure(RuntimeFailure):
    """Filesystem write or read failed."""


class InvalidSpacing(ConfigError):
    """Voxel spacing must be strictly positive."""


class EmptyMask(DataError):
    """Operation requires a non-empty binary mask."""


# --- phantom ---

class InvalidSpec(ConfigError):
    """Phantom specification violates its invariants."""


# --- registration ---

class NoLungFound(DataError):
    """No qualifying air component inside the body region."""


class OutOfExtent(DataError):
    """Query point outside the control grid support."""


# --- network ---

class InvalidConfig(ConfigError):
    """Network topology configuration is inconsistent."""


class ShapeError(DataError):
    """Tensor shapes incompatible with the requested operation."""


class NonFiniteGradient(RuntimeFailure):
    """Gradient contains NaN or Inf."""


class ManifestMismatch(DataError):
    """Weight manifest disagrees with blob contents or config fingerprint."""


# --- fusion ---

class MissingRegisteredPET(DataError):
    """Stream recipe needs a registered PET volume that is absent."""


class MissingUpstreamModel(DataError):
    """Late-fusion channels need trained upstream models."""


class ChannelMismatch(DataError):
    """Channel count does not match the model input."""


class WindowLargerThanVolume(DataError):
    """Sliding window exceeds the volume along some axis."""


# --- evaluation / harness ---

class TooFewCases(ConfigError):
    """Fewer cases than folds."""


class NoRecords(DataError):
    """Aggregation requires at least one metrics record."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, DataError):
        return 3
    return 4
