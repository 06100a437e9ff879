"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid argument or configuration value."""


class GeometryError(InputError):
    """Geometric precondition violated (degenerate cell, r_o <= r_w, ...)."""


class OutOfRangeError(ValueError):
    """Table lookup below the supported pressure range."""


class DeckError(ValueError):
    """Deck text could not be parsed. Carries 1-based line/column."""

    def __init__(self, message, line=None, col=None, path=None):
        self.line = line
        self.col = col
        self.path = path
        where = ""
        if path is not None:
            where += str(path)
        if line is not None:
            where += f":{line}"
            if col is not None:
                where += f":{col}"
        super().__init__(f"{where}: {message}" if where else message)


class FactorizationError(RuntimeError):
    """ILU(0) hit a zero pivot that the shift retry could not cure."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class DecouplingError(RuntimeError):
    """Quasi-IMPES elimination failed structurally."""


class DivergenceError(RuntimeError):
    """Krylov solver stagnated or broke down beyond recovery."""


class NonconvergenceError(RuntimeError):
    """Newton or the timestep controller ran out of retries."""
