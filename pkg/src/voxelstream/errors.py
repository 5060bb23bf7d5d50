"""Exception types shared across the library.

Every error family has a dedicated class so callers (and the CLI exit-code
mapping) can distinguish bad configuration from bad data from numerical
blowups.
"""


class ShapeError(ValueError):
    """Tensor extents disagree with what an operation requires."""


class InvalidSpecError(ValueError):
    """A layer/network specification cannot produce a valid output shape."""


class ContractError(ValueError):
    """A caller violated an operation's contract (e.g. non-scalar loss)."""


class FormatError(ValueError):
    """A binary file is corrupt, truncated, or carries the wrong magic."""


class PairingError(ValueError):
    """Frame/flow file counts cannot be paired into a valid sample."""


class GenerationError(ValueError):
    """The synthetic generator config cannot be realised (e.g. shape exits frame)."""


class ConfigError(ValueError):
    """Run configuration is malformed: unknown key, bad value, missing path."""


class NumericalError(RuntimeError):
    """Training or optimisation hit a non-finite value."""
