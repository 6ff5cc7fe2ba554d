"""Bit-append state space: partially built bit vectors on a graded DAG.

A state has D positions, each either unset or holding a zero/one bit. A
forward transition sets exactly one unset position, so every complete
trajectory from the empty root to a fully set terminating state takes
exactly D steps, and the DAG is graded by the number of set positions.

Numeric form maps unset to 0 and zero/one bits to -1/+1. Terminating
states are therefore full sign vectors and double as spin configurations;
the same mapping serves both the density tasks and the Ising tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "UNSET",
    "ZERO",
    "ONE",
    "NotAnEdgeError",
    "State",
    "Trajectory",
    "children",
    "parents",
    "added_transition",
    "flip_added_bit",
    "gray_encode",
    "gray_decode",
    "cell_to_state",
    "state_to_cell",
    "all_terminal_bits",
]

UNSET, ZERO, ONE = 0, 1, 2

# Numeric value of a position, indexed by UNSET / ZERO / ONE.
_NUMERIC = np.array([0.0, -1.0, 1.0])

_CHARS = {UNSET: "-", ZERO: "0", ONE: "1"}
_CHARS_INV = {v: k for k, v in _CHARS.items()}


class NotAnEdgeError(ValueError):
    """The given pair of states is not a one-bit parent/child transition."""


@dataclass(frozen=True, order=True)
class State:
    """Immutable state of ``dim`` positions, packed one base-4 digit each.

    ``code`` stores position d in bits 2d..2d+1 using the UNSET/ZERO/ONE
    encoding, which keeps states hashable and cheap to copy.
    """

    dim: int
    code: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("state needs at least one position")
        if self.code < 0 or self.code >> (2 * self.dim):
            raise ValueError("state code out of range for dimension")

    @classmethod
    def root(cls, dim: int) -> "State":
        return cls(dim, 0)

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "State":
        code = 0
        dim = 0
        for d, b in enumerate(bits):
            if b not in (UNSET, ZERO, ONE):
                raise ValueError(f"invalid position value {b!r}")
            code |= b << (2 * d)
            dim = d + 1
        return cls(dim, code)

    @classmethod
    def from_string(cls, text: str) -> "State":
        """Parse states written like ``"1-0"`` (one, unset, zero)."""
        try:
            return cls.from_bits(_CHARS_INV[c] for c in text)
        except KeyError as exc:
            raise ValueError(f"invalid state character {exc.args[0]!r}") from None

    @classmethod
    def terminal_from_bits(cls, bits01: Sequence[int]) -> "State":
        """Terminating state from plain 0/1 values."""
        return cls.from_bits(ONE if b else ZERO for b in bits01)

    @classmethod
    def from_numeric(cls, values: Sequence[float]) -> "State":
        return cls.from_bits(UNSET if v == 0 else (ONE if v > 0 else ZERO) for v in values)

    def bit(self, d: int) -> int:
        if not 0 <= d < self.dim:
            raise ValueError(f"position {d} out of range")
        return (self.code >> (2 * d)) & 3

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple((self.code >> (2 * d)) & 3 for d in range(self.dim))

    def num_set_bits(self) -> int:
        # A position is set iff its base-4 digit is nonzero; OR-ing the two
        # bits of each digit into the low lane makes that a popcount.
        mask = (4 ** self.dim - 1) // 3
        return ((self.code | self.code >> 1) & mask).bit_count()

    def is_root(self) -> bool:
        return self.code == 0

    def is_terminating(self) -> bool:
        return self.num_set_bits() == self.dim

    def set_positions(self) -> tuple[int, ...]:
        return tuple(d for d in range(self.dim) if self.bit(d) != UNSET)

    def unset_positions(self) -> tuple[int, ...]:
        return tuple(d for d in range(self.dim) if self.bit(d) == UNSET)

    def with_bit(self, d: int, value: int) -> "State":
        if value not in (ZERO, ONE):
            raise ValueError("a transition must set a zero or one bit")
        if self.bit(d) != UNSET:
            raise ValueError(f"position {d} is already set")
        return State(self.dim, self.code | value << (2 * d))

    def without_bit(self, d: int) -> "State":
        if self.bit(d) == UNSET:
            raise ValueError(f"position {d} is not set")
        return State(self.dim, self.code & ~(3 << (2 * d)))

    def to_numeric(self) -> np.ndarray:
        return _NUMERIC[np.fromiter(self.bits, dtype=np.int64, count=self.dim)]

    def terminal_index(self) -> int:
        """Index of a terminating state: position d contributes 2^d when one."""
        if not self.is_terminating():
            raise ValueError("state is not terminating")
        return sum(1 << d for d in range(self.dim) if self.bit(d) == ONE)

    def __str__(self) -> str:
        return "".join(_CHARS[b] for b in self.bits)

    def __repr__(self) -> str:
        return f"State('{self}')"


def children(state: State) -> list[State]:
    """All one-bit extensions, position ascending with zero before one."""
    if state.is_terminating():
        raise ValueError("terminating state has no children")
    out = []
    for d in state.unset_positions():
        out.append(state.with_bit(d, ZERO))
        out.append(state.with_bit(d, ONE))
    return out


def parents(state: State) -> list[State]:
    """All one-bit retractions, position ascending."""
    if state.is_root():
        raise ValueError("root state has no parents")
    return [state.without_bit(d) for d in state.set_positions()]


def added_transition(state: State, child: State) -> tuple[int, int]:
    """Return (position, bit value) of the transition ``state -> child``.

    Raises NotAnEdgeError unless ``child`` extends ``state`` by one bit.
    """
    if state.dim != child.dim:
        raise NotAnEdgeError("states have different dimensions")
    diff = state.code ^ child.code
    if diff == 0:
        raise NotAnEdgeError(f"{state} -> {child} is not a single-bit extension")
    pos = (diff.bit_length() - 1) // 2
    # The change must be confined to digit ``pos`` and go UNSET -> ZERO/ONE,
    # in which case the XOR equals the child's digit shifted into place.
    if (
        diff != (child.code >> (2 * pos) & 3) << (2 * pos)
        or state.bit(pos) != UNSET
        or child.bit(pos) == UNSET
    ):
        raise NotAnEdgeError(f"{state} -> {child} is not a single-bit extension")
    return pos, child.bit(pos)


def flip_added_bit(state: State, child: State) -> np.ndarray:
    """Numeric form of ``child`` with the bit added since ``state`` negated."""
    pos, _ = added_transition(state, child)
    values = child.to_numeric()
    values[pos] = -values[pos]
    return values


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A complete root-to-terminating path with cached per-step log-probs.

    ``added_pos``/``added_bit`` record which position was set at each step
    and whether it became a one; ``step_log_pf``/``step_log_pb`` hold the
    forward and backward transition log-probabilities (NaN when unscored).
    """

    states: tuple[State, ...]
    added_pos: np.ndarray = field(repr=False)
    added_bit: np.ndarray = field(repr=False)
    step_log_pf: np.ndarray = field(repr=False)
    step_log_pb: np.ndarray = field(repr=False)

    @classmethod
    def from_states(
        cls,
        states: Sequence[State],
        step_log_pf: np.ndarray | None = None,
        step_log_pb: np.ndarray | None = None,
    ) -> "Trajectory":
        states = tuple(states)
        if not states or not states[0].is_root():
            raise ValueError("trajectory must start at the root")
        dim = states[0].dim
        if len(states) != dim + 1 or not states[-1].is_terminating():
            raise ValueError("trajectory must run root -> terminating in dim steps")
        pos = np.empty(dim, dtype=np.int64)
        bit = np.empty(dim, dtype=np.int64)
        for t in range(dim):
            p, b = added_transition(states[t], states[t + 1])
            pos[t] = p
            bit[t] = 1 if b == ONE else 0
        if step_log_pf is None:
            step_log_pf = np.full(dim, np.nan)
        if step_log_pb is None:
            step_log_pb = np.full(dim, np.nan)
        step_log_pf = np.asarray(step_log_pf, dtype=np.float64)
        step_log_pb = np.asarray(step_log_pb, dtype=np.float64)
        if step_log_pf.shape != (dim,) or step_log_pb.shape != (dim,):
            raise ValueError("per-step log-prob arrays must have one entry per step")
        return cls(states, pos, bit, step_log_pf, step_log_pb)

    @property
    def dim(self) -> int:
        return self.states[0].dim

    @property
    def terminal(self) -> State:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def log_pf(self) -> float:
        return float(self.step_log_pf.sum())

    @property
    def log_pb(self) -> float:
        return float(self.step_log_pb.sum())


def gray_encode(n: int, bits: int) -> int:
    """Reflected Gray code of ``n`` in a ``bits``-wide register."""
    if bits < 1:
        raise ValueError("need at least one bit")
    if not 0 <= n < (1 << bits):
        raise ValueError(f"value {n} out of range for {bits} bits")
    return n ^ (n >> 1)


def gray_decode(code: int, bits: int) -> int:
    """Inverse of :func:`gray_encode` on the same register width."""
    if bits < 1:
        raise ValueError("need at least one bit")
    if not 0 <= code < (1 << bits):
        raise ValueError(f"code {code} out of range for {bits} bits")
    n = code
    shift = 1
    while shift < bits:
        n ^= n >> shift
        shift <<= 1
    return n


def cell_to_state(cell: tuple[int, int], bits_per_dim: int) -> State:
    """Map a 2-D grid cell to a terminating state of dimension 2*bits_per_dim.

    Each coordinate is Gray-encoded and written most significant bit first;
    the first bits_per_dim positions carry the first coordinate.
    """
    i, j = cell
    gi = gray_encode(i, bits_per_dim)
    gj = gray_encode(j, bits_per_dim)
    bits = []
    for g in (gi, gj):
        bits.extend((g >> (bits_per_dim - 1 - d)) & 1 for d in range(bits_per_dim))
    return State.terminal_from_bits(bits)


def state_to_cell(state: State, bits_per_dim: int) -> tuple[int, int]:
    """Inverse of :func:`cell_to_state`; requires a terminating state."""
    if state.dim != 2 * bits_per_dim:
        raise ValueError("state dimension does not match the grid")
    if not state.is_terminating():
        raise ValueError("state is not terminating")
    coords = []
    for half in range(2):
        g = 0
        for d in range(bits_per_dim):
            b = state.bit(half * bits_per_dim + d)
            g |= (1 if b == ONE else 0) << (bits_per_dim - 1 - d)
        coords.append(gray_decode(g, bits_per_dim))
    return coords[0], coords[1]


def all_terminal_bits(dim: int) -> np.ndarray:
    """All 2^dim terminating states as 0/1 rows, ordered by terminal index."""
    if dim > 24:
        raise ValueError("terminal enumeration capped at 24 positions")
    idx = np.arange(1 << dim, dtype=np.int64)
    return (idx[:, None] >> np.arange(dim)) & 1
