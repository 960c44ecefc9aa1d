"""Exception types raised by seglab."""

from __future__ import annotations


class SeglabError(Exception):
    pass


class InvalidParameterError(SeglabError, ValueError):
    pass


class InvalidInputError(SeglabError, ValueError):
    pass


class UndefinedRegionError(SeglabError):
    def __init__(self, k: int) -> None:
        super().__init__(f"region {k} is empty")
        self.k = k


class DegenerateMarginalError(SeglabError):
    pass


class InvalidSpecError(SeglabError, ValueError):
    pass


class ConfigError(SeglabError):
    pass
