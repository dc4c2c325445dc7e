"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class SegVaeError(Exception):
    exit_code = 2


class FormatError(SegVaeError):
    """Malformed file header or payload layout."""


class UnsupportedError(SegVaeError):
    """Well-formed input that uses a feature outside the supported subset."""


class DataError(SegVaeError):
    """Payload values violate a domain invariant (NaN, illegal label, ...)."""


class BoundsError(SegVaeError):
    pass


class DegenerateInputError(SegVaeError):
    pass


class ShapeError(SegVaeError):
    pass


class ConfigError(SegVaeError):
    pass


class StateError(SegVaeError):
    pass


class RangeError(SegVaeError):
    pass


class ArgumentError(SegVaeError):
    pass


class CorruptionError(SegVaeError):
    pass


class IOFailure(SegVaeError):
    exit_code = 3


class DivergenceError(SegVaeError):
    exit_code = 4

    def __init__(self, epoch, sample, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, sample {sample}")
        self.epoch = epoch
        self.sample = sample
        self._args = (epoch, sample, value)

    def __reduce__(self):
        # keeps the error intact across process boundaries
        return type(self), self._args


class BudgetError(SegVaeError):
    exit_code = 5

    def __init__(self, site, requested, live, budget):
        super().__init__(
            f"memory budget exceeded at {site}: live {live} + {requested} bytes > budget {budget}"
        )
        self.site = site
        self._args = (site, requested, live, budget)

    def __reduce__(self):
        return type(self), self._args


class GradcheckFailure(SegVaeError):
    exit_code = 6
