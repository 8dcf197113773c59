from __future__ import annotations


class PrismError(RuntimeError):
    pass


class ConfigError(PrismError):
    """Неверная или неполная конфигурация; CLI отвечает на неё кодом 2."""


class ShapeError(PrismError, ValueError):
    pass


class NonFiniteError(PrismError, FloatingPointError):
    def __init__(self, message: str, *, where: str | None = None) -> None:
        super().__init__(message if where is None else f"{message} ({where})")
        self.where = where


class VocabMismatchError(PrismError):
    pass


class TapeError(PrismError):
    pass
