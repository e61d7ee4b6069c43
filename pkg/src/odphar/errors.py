"""Exception types raised across the package."""


class OdpharError(Exception):
    """Base class for all package errors."""


class ShapeError(OdpharError, ValueError):
    """Tensor or parameter shapes are inconsistent."""


class ParameterError(OdpharError, ValueError):
    """A scalar argument is outside its admissible range."""


class DataError(OdpharError, ValueError):
    """A dataset, manifest or split is empty or malformed."""


class PlacementError(OdpharError):
    """A model does not fit a memory tier.

    Attributes
    ----------
    tier : str
        ``"L1"`` or ``"L2"``.
    required, capacity : int
        Bytes needed and bytes available.
    """

    def __init__(self, tier, required, capacity):
        self.tier = tier
        self.required = int(required)
        self.capacity = int(capacity)
        super().__init__(
            f"{tier} overflow: need {self.required} bytes, capacity {self.capacity} "
            f"(over by {self.overflow} bytes)"
        )

    @property
    def overflow(self):
        return self.required - self.capacity
