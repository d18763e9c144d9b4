from __future__ import annotations

from typing import Any, Dict, Optional


class NASError(Exception):
    """Raised when the search engine encounters a problem."""

    exit_code = 1


class ConfigError(NASError):
    """Raised for invalid configuration: ids, presets, budgets, template flags."""

    exit_code = 2


class ArchitectureError(ConfigError):
    """Raised when alphas, genotypes, op spaces or tensor shapes disagree."""


class SearchError(ConfigError):
    """Raised when search state is used out of order."""


class DataError(NASError):
    """Raised for missing, truncated or malformed datasets and run artifacts."""

    exit_code = 3


class NumericalError(NASError):
    """Raised when a loss or logit tensor stops being finite."""

    exit_code = 4

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class TournamentBudgetExhausted(NASError):
    """Raised when a tournament stops after its run budget; state is persisted."""

    exit_code = 0
