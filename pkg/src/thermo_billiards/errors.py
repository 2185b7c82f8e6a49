"""Exception types shared across the package."""


class BilliardError(Exception):
    """Base class for all package errors."""


class InvalidState(BilliardError, ValueError):
    """A state, table index or input violates a precondition."""


class NoCollisionWithinCap(BilliardError):
    """A free flight exceeded the table's ``sigma_cap``.

    Raised at runtime when tracing finds no scatterer within the cap.  On a
    table with bounded horizon and a sane cap this never happens, so it is
    treated as a horizon violation.
    """

    def __init__(self, position, direction, sigma_cap):
        self.position = tuple(position)
        self.direction = tuple(direction)
        self.sigma_cap = sigma_cap
        super().__init__(
            f"no collision within sigma_cap={sigma_cap} from {self.position} "
            f"along {self.direction}"
        )


class DomainError(BilliardError, ValueError):
    """An argument lies outside the domain of a closed-form function."""


class UnsupportedRegime(BilliardError):
    """The requested computation is only defined for equal temperatures."""
