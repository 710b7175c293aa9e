"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`HsiclError`.
Each subclass carries a ``category`` string and an ``exit_code`` used by the
command line front end.
"""


class HsiclError(Exception):
    category = "error"
    exit_code = 1


class ShapeError(HsiclError, ValueError):
    category = "shape"
    exit_code = 7


class DegenerateInputError(HsiclError, ValueError):
    category = "degenerate-input"
    exit_code = 7


class ConfigError(HsiclError, ValueError):
    category = "config"
    exit_code = 3


class DatasetError(HsiclError):
    category = "dataset"
    exit_code = 4


class CheckpointError(HsiclError):
    category = "checkpoint"
    exit_code = 5


class NonFiniteError(HsiclError, FloatingPointError):
    category = "non-finite"
    exit_code = 6
