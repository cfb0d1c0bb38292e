"""Byzantine message generation.

Each Byzantine agent broadcasts one malicious model per round to all of
its neighbors. Generators are pure given the round snapshot and a random
stream, and never mutate regular agents' state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, InvalidInputError
from .topology import Network

ATTACK_KINDS = ("none", "gaussian", "sign_flip", "sample_duplicate", "lowerbound")


@dataclass(frozen=True)
class AttackSpec:
    """Which attack Byzantine agents run, with its parameters."""

    kind: str = "none"
    std: float = 100.0  # gaussian
    c: float = -4.0  # sign_flip multiplier
    target: int = 0  # sample_duplicate: regular agent whose model is copied

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind '{self.kind}'")
        if self.kind == "gaussian" and not self.std > 0:
            raise ConfigError("gaussian attack needs std > 0")

    def validate(self, net: Network) -> None:
        if self.kind == "none" and net.byzantine_ids:
            raise ConfigError("attack kind 'none' requires an empty Byzantine set")
        if self.kind == "sample_duplicate" and self.target not in net.regular_ids:
            raise ConfigError(f"sample_duplicate target {self.target} is not a regular agent")


def gaussian_attack(p: int, rng: np.random.Generator, std: float = 100.0) -> np.ndarray:
    """Message with i.i.d. N(0, std^2) entries."""
    if not std > 0:
        raise InvalidInputError("std must be positive")
    return std * rng.standard_normal(p)


def sign_flip_attack(x_true: np.ndarray, c: float) -> np.ndarray:
    """Broadcast c times the attacker's honestly computed current model."""
    return c * x_true


def sample_duplicate_attack(target_model: np.ndarray) -> np.ndarray:
    """Echo the chosen regular agent's current model verbatim."""
    return target_model.copy()


def lowerbound_attack(p: int) -> np.ndarray:
    """Constant all-(-1) message: sign(x_w - z) = +1 per entry while x_w = 0."""
    return -np.ones(p)
