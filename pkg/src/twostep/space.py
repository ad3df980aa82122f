"""Search-space definition and deterministic configuration sampling.

Every piece of randomness in this package bottoms out in two primitives
defined here, both specified constant-by-constant so results can be
reproduced from the numbers alone:

* ``splitmix64`` -- the 64-bit finalizer with gamma ``0x9E3779B97F4A7C15``
  and mixing multipliers ``0xBF58476D1CE4E5B9`` / ``0x94D049BB133111EB``
  (shifts 30, 27, 31).
* ``fnv1a64`` -- FNV-1a with offset basis ``0xcbf29ce484222325`` and prime
  ``0x100000001b3``, used for stable configuration ids and for folding
  string labels into seed derivations.

Seeds for individual trials are derived from a single master seed via
``derive_seed(master, step, trial_index, purpose)``; the derivation is a
pure function, so re-running any part of a search replays identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1

_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MUL1 = 0xBF58476D1CE4E5B9
_SM64_MUL2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

DEFAULT_LAYER_COUNT_CHOICES = tuple(range(1, 21))
DEFAULT_WIDTH_CHOICES = (8, 16, 32, 64, 128, 256, 512, 1024, 2048)


def splitmix64(x: int) -> int:
    """One splitmix64 step: add the gamma constant, then finalize.

    Returns a 64-bit unsigned integer that is a high-quality mix of ``x``.
    """
    z = (x + _SM64_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _SM64_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _SM64_MUL2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """FNV-1a hash of ``data`` as a 64-bit unsigned integer."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(master: int, step: int, trial_index: int, purpose: str) -> int:
    """Derive an independent 64-bit seed from a master seed and stream labels.

    The derivation chain, bit-exactly: starting from ``h = splitmix64(master)``,
    fold in each label with ``h = splitmix64(h ^ label)`` where the labels are,
    in order, ``step``, ``trial_index``, and ``fnv1a64(purpose.encode("utf-8"))``.
    Distinct label tuples give distinct outputs with overwhelming probability.
    """
    h = splitmix64(master & MASK64)
    h = splitmix64(h ^ (step & MASK64))
    h = splitmix64(h ^ (trial_index & MASK64))
    h = splitmix64(h ^ fnv1a64(purpose.encode("utf-8")))
    return h


class RandomStream:
    """Counter-based uniform stream: the i-th draw is ``splitmix64(seed + i)``.

    Stateless apart from the counter, so identical (seed, draw sequence)
    pairs replay identically in any process.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.counter = 0

    def next_u64(self) -> int:
        v = splitmix64((self.seed + self.counter) & MASK64)
        self.counter += 1
        return v

    def below(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo reduction; the bias is below
        n / 2**64 per draw, negligible for every n used here (< 2**32)."""
        if n <= 0:
            raise ValueError("below() requires n >= 1")
        return self.next_u64() % n


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 over a uint64 array; bit-identical to the scalar."""
    z = (np.asarray(x, dtype=np.uint64) + np.uint64(_SM64_GAMMA))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MUL2)
    return z ^ (z >> np.uint64(31))


def uniform01_array(seed: int, n: int) -> np.ndarray:
    """n floats in [0, 1) from the counter-based stream, 53-bit resolution."""
    bits = splitmix64_array(np.uint64(seed & MASK64) + np.arange(n, dtype=np.uint64))
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def permutation_array(n: int, seed: int) -> np.ndarray:
    """Deterministic permutation of range(n): sort positions by random keys."""
    keys = splitmix64_array(np.uint64(seed & MASK64) + np.arange(n, dtype=np.uint64))
    return np.argsort(keys, kind="stable")


class SpaceError(ValueError):
    """Invalid search-space or configuration construction."""


def _validate_choices(name: str, values: Sequence[int]) -> tuple[int, ...]:
    vals = tuple(int(v) for v in values)
    if not vals:
        raise SpaceError(f"{name} must be non-empty")
    if any(v < 1 for v in vals):
        raise SpaceError(f"{name} must contain only integers >= 1")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise SpaceError(f"{name} must be strictly increasing")
    return vals


@dataclass(frozen=True)
class SearchSpace:
    """Architecture search domain: hidden-layer count and per-layer width.

    Widths are drawn independently for every hidden layer, so the domain is
    the union over L of width_choices^L for each L in layer_count_choices.
    """

    layer_count_choices: tuple[int, ...] = DEFAULT_LAYER_COUNT_CHOICES
    width_choices: tuple[int, ...] = DEFAULT_WIDTH_CHOICES

    def __post_init__(self):
        object.__setattr__(
            self, "layer_count_choices",
            _validate_choices("layer_count_choices", self.layer_count_choices))
        object.__setattr__(
            self, "width_choices",
            _validate_choices("width_choices", self.width_choices))

    def validate(self, config: "TrialConfig") -> None:
        """Raise SpaceError unless ``config`` lies inside this space."""
        n = len(config.hidden_widths)
        if n < 1 or n > max(self.layer_count_choices):
            raise SpaceError(f"layer count {n} outside space")
        allowed = set(self.width_choices)
        for w in config.hidden_widths:
            if w not in allowed:
                raise SpaceError(f"width {w} not in width_choices")

    def to_json(self) -> dict:
        return {
            "layer_count_choices": list(self.layer_count_choices),
            "width_choices": list(self.width_choices),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SearchSpace":
        return cls(tuple(obj["layer_count_choices"]), tuple(obj["width_choices"]))


def config_id_for(hidden_widths: Iterable[int]) -> int:
    """Stable 64-bit id: FNV-1a over each width as 8 little-endian bytes."""
    buf = bytearray()
    for w in hidden_widths:
        buf += int(w).to_bytes(8, "little")
    return fnv1a64(bytes(buf))


@dataclass(frozen=True)
class TrialConfig:
    """One sampled architecture: an ordered tuple of hidden-layer widths."""

    hidden_widths: tuple[int, ...]
    config_id: int = field(init=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        if not widths:
            raise SpaceError("hidden_widths must be non-empty")
        if any(w < 1 for w in widths):
            raise SpaceError("hidden widths must be >= 1")
        object.__setattr__(self, "hidden_widths", widths)
        object.__setattr__(self, "config_id", config_id_for(widths))

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)

    def to_json(self) -> dict:
        return {"hidden_widths": list(self.hidden_widths)}

    @classmethod
    def from_json(cls, obj: dict) -> "TrialConfig":
        return cls(tuple(obj["hidden_widths"]))


def sample_config(space: SearchSpace, seed: int) -> TrialConfig:
    """Draw one configuration uniformly from ``space``.

    The layer count is drawn first, then one width per layer, each from a
    fresh position of the seeded stream. Identical (space, seed) pairs yield
    identical configurations across runs and processes.
    """
    stream = RandomStream(seed)
    n_layers = space.layer_count_choices[stream.below(len(space.layer_count_choices))]
    widths = tuple(
        space.width_choices[stream.below(len(space.width_choices))]
        for _ in range(n_layers)
    )
    return TrialConfig(widths)


def param_count(hidden_widths: Sequence[int], n_inputs: int, n_outputs: int) -> int:
    """Learnable parameters (weights + biases) of a dense network.

    With layer sizes d0=n_inputs, d1..dk=hidden_widths, d_{k+1}=n_outputs,
    the count is sum over consecutive pairs of (d_i + 1) * d_{i+1}.
    """
    if n_inputs < 1 or n_outputs < 1:
        raise ValueError("n_inputs and n_outputs must be >= 1")
    if not hidden_widths:
        raise SpaceError("hidden_widths must be non-empty")
    dims = [int(n_inputs), *[int(w) for w in hidden_widths], int(n_outputs)]
    return sum((a + 1) * b for a, b in zip(dims, dims[1:]))
