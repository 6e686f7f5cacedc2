from __future__ import annotations


class ParameterError(ValueError):
    """An argument lies outside its allowed range."""


class TokenRangeError(ValueError):
    """A token id is negative or not below the vocabulary size."""


class NoCountablePositions(ValueError):
    """Detection found no position eligible for green-list counting."""


class AbsoluteContinuityError(ValueError):
    """q puts mass where p has none, so KL(q || p) is infinite."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
