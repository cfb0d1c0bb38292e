"""Shared numeric vocabulary: model vectors, stacked states, seeded streams.

All real scalars are 64-bit floats. Model vectors are plain 1-D numpy
arrays of a fixed length p; a StackedState concatenates the models of all
regular agents in ascending agent-id order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

_MASK64 = (1 << 64) - 1


class InvalidInputError(ValueError):
    """An operation received a value outside its numeric contract."""


class ShapeMismatchError(ValueError):
    """Two states do not share the same agent set or dimension."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DataError(ValueError):
    """A dataset file is missing, truncated, or otherwise unusable."""


class InfeasibilityError(RuntimeError):
    """A randomized construction could not satisfy its constraint."""


class UnsupportedStateError(RuntimeError):
    """A diagnostic was requested on state that does not carry it."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""


class DivergenceError(RuntimeError):
    """An iterate became non-finite during simulation."""

    def __init__(self, agent: int, round_: int):
        super().__init__(f"non-finite iterate at agent {agent}, round {round_}")
        self.agent = agent
        self.round = round_


def _purpose_tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def rng_stream(seed: int, agent: int = 0, purpose: str = "", round_: int = 0) -> np.random.Generator:
    """Counter-based random stream keyed by (seed, agent, purpose, round).

    Identical keys give identical draws on every platform; distinct keys
    give statistically independent streams. Keying each per-agent,
    per-round draw separately makes simulation results independent of
    agent iteration order and thread count.
    """
    if agent < 0 or round_ < 0:
        raise InvalidInputError("agent id and round must be nonnegative")
    key = np.array([seed & _MASK64, agent], dtype=np.uint64)
    counter = np.array([0, round_, _purpose_tag(purpose), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class RoundStream:
    """Reusable per-(agent, purpose) stream, cheaply rewound to any round.

    ``at_round(k)`` yields exactly the same draws as
    ``rng_stream(seed, agent, purpose, k)`` but avoids re-constructing the
    bit generator in hot loops.
    """

    def __init__(self, seed: int, agent: int = 0, purpose: str = ""):
        self._bg = np.random.Philox(
            key=np.array([seed & _MASK64, agent], dtype=np.uint64),
            counter=np.array([0, 0, _purpose_tag(purpose), 0], dtype=np.uint64),
        )
        self._gen = np.random.Generator(self._bg)
        self._template = self._bg.state

    def at_round(self, round_: int) -> np.random.Generator:
        st = self._template
        st["state"]["counter"][0] = 0
        st["state"]["counter"][1] = round_
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bg.state = st
        return self._gen


def sign_vec(v: np.ndarray) -> np.ndarray:
    """Entrywise sign with sign(0) = 0; rejects non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("sign_vec: input has non-finite entries")
    return np.sign(v)


@dataclass(frozen=True)
class StackedState:
    """Concatenation of the regular agents' models, ascending agent id.

    ``values[i]`` is the model of agent ``agent_ids[i]``. Arrays are not
    defensively copied; treat instances as immutable.
    """

    agent_ids: tuple[int, ...]
    values: np.ndarray  # shape (R, p)

    def __post_init__(self):
        if len(self.agent_ids) != self.values.shape[0]:
            raise ShapeMismatchError("agent count does not match value rows")
        if any(a >= b for a, b in zip(self.agent_ids, self.agent_ids[1:])):
            raise InvalidInputError("agent ids must be strictly ascending")

    @classmethod
    def stack(cls, models: Mapping[int, np.ndarray]) -> "StackedState":
        ids = tuple(sorted(models))
        values = np.stack([np.asarray(models[w], dtype=np.float64) for w in ids])
        return cls(ids, values)

    def unstack(self) -> dict[int, np.ndarray]:
        return {w: self.values[i] for i, w in enumerate(self.agent_ids)}

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def sq_dist(a: StackedState, b: StackedState) -> float:
    """Sum over agents of the squared Euclidean distance between models."""
    if a.agent_ids != b.agent_ids or a.values.shape != b.values.shape:
        raise ShapeMismatchError("sq_dist: states have different agent sets or dimensions")
    diff = a.values - b.values
    return float(np.sum(diff * diff))
