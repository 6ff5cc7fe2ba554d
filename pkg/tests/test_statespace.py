import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfnvi.statespace import (
    ONE,
    UNSET,
    ZERO,
    NotAnEdgeError,
    State,
    Trajectory,
    added_transition,
    all_terminal_bits,
    cell_to_state,
    children,
    flip_added_bit,
    gray_decode,
    gray_encode,
    parents,
    state_to_cell,
)


def S(text):
    return State.from_string(text)


class TestState:
    def test_num_set_bits(self):
        assert State.root(4).num_set_bits() == 0
        assert S("0110").num_set_bits() == 4
        assert S("1-0-").num_set_bits() == 2

    def test_terminating_iff_fully_set(self):
        assert S("01").is_terminating()
        assert not S("0-").is_terminating()
        assert not State.root(3).is_terminating()

    def test_numeric_conventions(self):
        np.testing.assert_array_equal(S("1-0-").to_numeric(), [1.0, 0.0, -1.0, 0.0])
        s = S("10-1")
        assert s.num_set_bits() == int(np.abs(s.to_numeric()).sum())

    def test_from_numeric_roundtrip(self):
        s = S("0-11")
        assert State.from_numeric(s.to_numeric()) == s

    def test_terminal_index_matches_bit_table(self):
        table = all_terminal_bits(3)
        for idx in range(8):
            s = State.terminal_from_bits(table[idx])
            assert s.terminal_index() == idx


class TestTransitions:
    def test_children_count_root(self):
        assert len(children(State.root(2))) == 4

    def test_children_of_partial(self):
        got = children(S("1-"))
        assert got == [S("10"), S("11")]

    def test_children_of_terminating_rejected(self):
        with pytest.raises(ValueError):
            children(S("01"))

    def test_parents_two_set(self):
        assert set(parents(S("10"))) == {S("-0"), S("1-")}

    def test_parents_single_set(self):
        assert parents(S("1--")) == [State.root(3)]

    def test_parents_of_root_rejected(self):
        with pytest.raises(ValueError):
            parents(State.root(2))

    def test_added_transition_identifies_edge(self):
        assert added_transition(S("1-"), S("10")) == (1, ZERO)
        assert added_transition(S("--"), S("-1")) == (1, ONE)

    def test_added_transition_rejects_non_edges(self):
        with pytest.raises(NotAnEdgeError):
            added_transition(S("--"), S("01"))  # two bits at once
        with pytest.raises(NotAnEdgeError):
            added_transition(S("1-"), S("1-"))  # no change
        with pytest.raises(NotAnEdgeError):
            added_transition(S("0-"), S("1-"))  # mutation, not extension
        with pytest.raises(NotAnEdgeError):
            added_transition(S("1-"), S("---"))  # dimension mismatch

    def test_flip_added_bit_pins(self):
        np.testing.assert_array_equal(flip_added_bit(S("-"), S("1")), [-1.0])
        np.testing.assert_array_equal(flip_added_bit(S("1-"), S("10")), [1.0, 1.0])
        np.testing.assert_array_equal(flip_added_bit(S("--"), S("0-")), [1.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.data())
def test_children_parents_mutually_consistent(dim, data):
    code = data.draw(st.integers(0, 4**dim - 1))
    digits = [(code >> (2 * d)) & 3 for d in range(dim)]
    if any(v == 3 for v in digits):
        return
    s = State(dim, sum(v << (2 * d) for d, v in enumerate(digits)))
    if not s.is_terminating():
        kids = children(s)
        assert len(kids) == 2 * (dim - s.num_set_bits())
        for c in kids:
            assert s in parents(c)
    if not s.is_root():
        for p in parents(s):
            assert s in children(p)
            pos, bit = added_transition(p, s)
            assert s.bit(pos) == bit and p.bit(pos) == UNSET


class TestGray:
    def test_pins(self):
        assert gray_encode(0, 4) == 0b0000
        assert gray_encode(2, 4) == 0b0011
        assert gray_encode(5, 4) == 0b0111

    @pytest.mark.parametrize("bits", [1, 2, 5, 12])
    def test_roundtrip_and_adjacency(self, bits):
        codes = [gray_encode(n, bits) for n in range(1 << bits)]
        assert sorted(codes) == list(range(1 << bits))
        for n, code in enumerate(codes):
            assert gray_decode(code, bits) == n
            if n:
                assert bin(code ^ codes[n - 1]).count("1") == 1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            gray_encode(16, 4)
        with pytest.raises(ValueError):
            gray_decode(-1, 4)


class TestCellMapping:
    def test_pins(self):
        assert cell_to_state((0, 0), 2) == S("0000")
        assert cell_to_state((1, 0), 2) == S("0100")
        assert cell_to_state((2, 3), 2) == S("1110")

    @pytest.mark.parametrize("bits_per_dim", [1, 2, 4])
    def test_roundtrip_all_cells(self, bits_per_dim):
        n = 1 << bits_per_dim
        seen = set()
        for i in range(n):
            for j in range(n):
                s = cell_to_state((i, j), bits_per_dim)
                assert s.is_terminating() and s.dim == 2 * bits_per_dim
                assert state_to_cell(s, bits_per_dim) == (i, j)
                seen.add(s.code)
        assert len(seen) == n * n

    def test_neighbour_cells_differ_in_one_bit(self):
        b = 3
        for i in range(8):
            for j in range(8):
                here = cell_to_state((i, j), b).bits
                if i + 1 < 8:
                    there = cell_to_state((i + 1, j), b).bits
                    assert sum(x != y for x, y in zip(here, there)) == 1
                if j + 1 < 8:
                    there = cell_to_state((i, j + 1), b).bits
                    assert sum(x != y for x, y in zip(here, there)) == 1


class TestTrajectory:
    def test_graded_path(self):
        states = [State.root(3), S("--1"), S("0-1"), S("011")]
        t = Trajectory.from_states(states)
        assert len(t) == 4 and t.terminal == S("011")
        np.testing.assert_array_equal(t.added_pos, [2, 0, 1])
        np.testing.assert_array_equal(t.added_bit, [1, 0, 1])

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            Trajectory.from_states([State.root(2), S("1-")])

    def test_rejects_non_root_start(self):
        with pytest.raises(ValueError):
            Trajectory.from_states([S("1-"), S("10")])

    def test_log_prob_sums(self):
        states = [State.root(2), S("1-"), S("10")]
        t = Trajectory.from_states(states, [-0.5, -1.0], [-np.log(1), -np.log(2)])
        assert t.log_pf == pytest.approx(-1.5)
        assert t.log_pb == pytest.approx(-np.log(2))


def test_all_terminal_bits_shape_and_order():
    table = all_terminal_bits(4)
    assert table.shape == (16, 4)
    np.testing.assert_array_equal(table[0], [0, 0, 0, 0])
    np.testing.assert_array_equal(table[5], [1, 0, 1, 0])
    assert len({tuple(r) for r in table.tolist()}) == 16
