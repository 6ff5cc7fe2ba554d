"""Forward and backward transition policies and trajectory sampling.

The forward policy picks an unset position uniformly and samples its bit
from a two-way softmax whose logits come from an MLP applied to the current
state. The backward policy removes a set bit, either uniformly or through
learned removal scores. A shared mode runs both directions off one net with
four output heads per position (two bit logits, two removal scores).

Samplers are vectorised over a batch and keep per-step log-probabilities so
objectives can reweight them without re-walking the DAG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nnet import MlpSpec, ParameterStore, mlp_backward, mlp_forward
from .statespace import ONE, ZERO, State, Trajectory, added_transition

__all__ = [
    "ForwardPolicy",
    "BackwardPolicy",
    "WeightedTrajectory",
    "TrajectoryBatch",
    "sample_forward_batch",
    "sample_backward_batch",
    "sample_forward",
    "sample_backward",
    "sample_backward_from",
    "backward_paths_from",
    "forward_step_log_prob",
    "backward_step_log_prob",
    "trajectory_log_q",
    "trajectory_log_pb",
    "trajectory_log_flow",
    "remove_steps",
    "build_steps",
    "score_build_path",
    "score_removal_path",
]


def _as_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


@dataclass(frozen=True)
class ForwardPolicy:
    """Bit-append policy: uniform position choice times a learned bit softmax.

    ``n_heads`` is 2 for a standalone forward net and 4 when the net is
    shared with the backward policy (heads 0..1 are the bit logits either
    way). With ``child_logits`` the two logits are read from the net applied
    to the two candidate child states instead of the current state.
    """

    dim: int
    spec: MlpSpec
    slice_name: str = "phi"
    n_heads: int = 2
    child_logits: bool = False

    def __post_init__(self) -> None:
        if self.spec.in_dim != self.dim:
            raise ValueError("policy net must take the numeric state as input")
        if self.n_heads not in (2, 4):
            raise ValueError("n_heads must be 2 (standalone) or 4 (shared)")
        if self.spec.out_dim != self.n_heads * self.dim:
            raise ValueError("policy net must emit n_heads outputs per position")

    def params(self, store: ParameterStore) -> np.ndarray:
        return store.view(self.slice_name)

    def pair_logits(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        """Bit logits, shape (n, dim, 2), for a batch of numeric states."""
        out = mlp_forward(self.spec, self.params(store), _as_rows(x))
        return out.reshape(out.shape[0], self.dim, self.n_heads)[:, :, :2]

    def bit_log_probs(self, store: ParameterStore, x: np.ndarray, pos: np.ndarray) -> np.ndarray:
        """Log-probability pair for the bit set at ``pos``, shape (n, 2).

        ``x`` holds current states (``pos`` unset in each row). The uniform
        position factor is not included here.
        """
        x = _as_rows(x)
        pos = np.asarray(pos)
        n = x.shape[0]
        rows = np.arange(n)
        if not self.child_logits:
            pair = self.pair_logits(store, x)[rows, pos]
        else:
            stacked = np.vstack([x, x])
            stacked[rows, pos] = -1.0
            stacked[n + rows, pos] = 1.0
            logits = self.pair_logits(store, stacked)
            pair = np.stack([logits[rows, pos, 0], logits[n + rows, pos, 1]], axis=1)
        return pair - np.logaddexp(pair[:, 0], pair[:, 1])[:, None]

    # -- gradient plumbing -------------------------------------------------

    def _softmax_pair(self, store: ParameterStore, x: np.ndarray, pos: np.ndarray):
        lp = self.bit_log_probs(store, x, pos)
        return np.exp(lp)

    def _grad_rows(self, store, x, pos, bit, w):
        """Inputs and upstreams whose backward pass gives
        sum_m w_m * d log p(bit_m | x_m, pos_m) / d params."""
        n = x.shape[0]
        rows = np.arange(n)
        p = self._softmax_pair(store, x, pos)
        out_dim = self.spec.out_dim
        if not self.child_logits:
            upstream = np.zeros((n, out_dim))
            sel = (bit[:, None] == np.arange(2)[None, :]).astype(np.float64)
            vals = w[:, None] * (sel - p)
            upstream[rows, pos * self.n_heads + 0] = vals[:, 0]
            upstream[rows, pos * self.n_heads + 1] = vals[:, 1]
            return x, upstream
        stacked = np.vstack([x, x])
        stacked[rows, pos] = -1.0
        stacked[n + rows, pos] = 1.0
        upstream = np.zeros((2 * n, out_dim))
        upstream[rows, pos * self.n_heads + 0] = w * ((bit == 0) - p[:, 0])
        upstream[n + rows, pos * self.n_heads + 1] = w * ((bit == 1) - p[:, 1])
        return stacked, upstream

    def logq_grad_accumulate(
        self,
        store: ParameterStore,
        batch: "TrajectoryBatch",
        weights: np.ndarray,
        out_grad: np.ndarray,
    ) -> None:
        """Add sum_s weights[s] * d log Q(tau_s)/d params into ``out_grad``."""
        s, d = batch.size, batch.dim
        x = batch.prefix_numeric().reshape(s * d, d)
        pos = batch.added_pos.ravel()
        bit = batch.added_bit.ravel()
        w = np.repeat(np.asarray(weights, dtype=np.float64), d)
        inputs, upstream = self._grad_rows(store, x, pos, bit, w)
        grad, _ = mlp_backward(self.spec, self.params(store), inputs, upstream)
        start, stop = store.bounds(self.slice_name)
        out_grad[start:stop] += grad

    def logq_grad_per_sample(self, store: ParameterStore, batch: "TrajectoryBatch") -> np.ndarray:
        """Per-sample score vectors d log Q(tau_s)/d params, shape (S, n_params)."""
        s, d = batch.size, batch.dim
        x = batch.prefix_numeric()
        params = self.params(store)
        out = np.empty((s, self.spec.n_params))
        ones = np.ones(d)
        for i in range(s):
            inputs, upstream = self._grad_rows(
                store, x[i], batch.added_pos[i], batch.added_bit[i], ones
            )
            out[i], _ = mlp_backward(self.spec, params, inputs, upstream)
        return out


@dataclass(frozen=True)
class BackwardPolicy:
    """Bit-removal policy over set positions.

    ``uniform`` removes a uniformly chosen set bit and has no parameters.
    ``learned`` runs its own net emitting one removal score per position.
    ``shared`` reads removal scores from heads 2..3 of the forward net,
    indexed by the bit value currently at the position.
    """

    dim: int
    mode: str = "uniform"
    spec: MlpSpec | None = None
    slice_name: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "learned", "shared"):
            raise ValueError(f"unknown backward mode {self.mode!r}")
        if self.mode == "uniform":
            if self.spec is not None or self.slice_name is not None:
                raise ValueError("uniform backward policy takes no net")
            return
        if self.spec is None or self.slice_name is None:
            raise ValueError(f"{self.mode} backward policy needs a net and a slice")
        expected = self.dim if self.mode == "learned" else 4 * self.dim
        if self.spec.in_dim != self.dim or self.spec.out_dim != expected:
            raise ValueError("backward net shape does not match the state space")

    @property
    def has_params(self) -> bool:
        return self.mode != "uniform"

    def params(self, store: ParameterStore) -> np.ndarray:
        return store.view(self.slice_name)

    def _scores(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        """Raw removal scores, shape (n, dim); ``x`` holds child states."""
        out = mlp_forward(self.spec, self.params(store), x)
        if self.mode == "learned":
            return out
        heads = out.reshape(out.shape[0], self.dim, 4)
        sel = 2 + (x > 0).astype(np.int64)
        return np.take_along_axis(heads, sel[:, :, None], axis=2)[:, :, 0]

    def removal_log_probs(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        """log P(remove position | child state) rows; -inf at unset slots."""
        x = _as_rows(x)
        mask = x != 0
        if not mask.any(axis=1).all():
            raise ValueError("cannot remove a bit from the root state")
        if self.mode == "uniform":
            k = mask.sum(axis=1)
            return np.where(mask, -np.log(k)[:, None], -np.inf)
        scores = np.where(mask, self._scores(store, x), -np.inf)
        top = scores.max(axis=1, keepdims=True)
        lse = top + np.log(np.exp(scores - top).sum(axis=1, keepdims=True))
        return scores - lse

    def logpb_grad_accumulate(
        self,
        store: ParameterStore,
        batch: "TrajectoryBatch",
        weights: np.ndarray,
        out_grad: np.ndarray,
    ) -> None:
        """Add sum_s weights[s] * d log PB(tau_s)/d params into ``out_grad``."""
        if not self.has_params:
            return
        s, d = batch.size, batch.dim
        x = batch.child_numeric().reshape(s * d, d)
        pos = batch.added_pos.ravel()
        w = np.repeat(np.asarray(weights, dtype=np.float64), d)
        inputs, upstream = self._grad_rows(store, x, pos, w)
        grad, _ = mlp_backward(self.spec, self.params(store), inputs, upstream)
        start, stop = store.bounds(self.slice_name)
        out_grad[start:stop] += grad

    def _grad_rows(self, store, x, pos, w):
        n = x.shape[0]
        p = np.exp(self.removal_log_probs(store, x))  # zero at unset slots
        onehot = np.zeros_like(p)
        onehot[np.arange(n), pos] = 1.0
        vals = w[:, None] * (onehot - p)
        if self.mode == "learned":
            return x, vals
        upstream = np.zeros((n, self.dim, 4))
        sel = 2 + (x > 0).astype(np.int64)
        np.put_along_axis(upstream, sel[:, :, None], vals[:, :, None], axis=2)
        return x, upstream.reshape(n, 4 * self.dim)

    def logpb_grad_per_sample(self, store: ParameterStore, batch: "TrajectoryBatch") -> np.ndarray:
        if not self.has_params:
            raise ValueError("uniform backward policy has no parameters")
        s, d = batch.size, batch.dim
        x = batch.child_numeric()
        params = self.params(store)
        out = np.empty((s, self.spec.n_params))
        ones = np.ones(d)
        for i in range(s):
            inputs, upstream = self._grad_rows(store, x[i], batch.added_pos[i], ones)
            out[i], _ = mlp_backward(self.spec, params, inputs, upstream)
        return out


@dataclass(frozen=True, eq=False)
class WeightedTrajectory:
    """A trajectory with its sampling weight ingredients.

    ``log_weight`` is the normalisation-free log importance weight
    log R + log PB - log Q; the true log w differs from it by -log Z.
    """

    trajectory: Trajectory
    log_q: float
    log_pb: float
    log_r: float
    provenance: str

    @property
    def log_weight(self) -> float:
        return self.log_r + self.log_pb - self.log_q


@dataclass(eq=False)
class TrajectoryBatch:
    """Struct-of-arrays view of a batch of complete trajectories."""

    dim: int
    added_pos: np.ndarray  # (S, D) position set at each step
    added_bit: np.ndarray  # (S, D) 1 where a one-bit was set
    step_log_pf: np.ndarray  # (S, D)
    step_log_pb: np.ndarray  # (S, D)
    log_r: np.ndarray  # (S,)
    provenance: str = "forward"
    _prefix: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.added_pos.shape[0]

    @property
    def log_q(self) -> np.ndarray:
        return self.step_log_pf.sum(axis=1)

    @property
    def log_pb(self) -> np.ndarray:
        return self.step_log_pb.sum(axis=1)

    @property
    def log_weight(self) -> np.ndarray:
        return self.log_r + self.log_pb - self.log_q

    def prefix_numeric(self) -> np.ndarray:
        """States before each step, shape (S, D, dim)."""
        if self._prefix is None:
            s, d = self.size, self.dim
            cur = np.zeros((s, d))
            out = np.empty((s, d, d))
            rows = np.arange(s)
            for t in range(d):
                out[:, t] = cur
                cur[rows, self.added_pos[:, t]] = 2.0 * self.added_bit[:, t] - 1.0
            self._prefix = out
        return self._prefix

    def child_numeric(self) -> np.ndarray:
        """States after each step, shape (S, D, dim)."""
        prefix = self.prefix_numeric()
        out = np.empty_like(prefix)
        out[:, :-1] = prefix[:, 1:]
        out[:, -1] = self.terminal_numeric()
        return out

    def terminal_numeric(self) -> np.ndarray:
        s, d = self.size, self.dim
        term = np.empty((s, d))
        rows = np.arange(s)[:, None]
        term[rows, self.added_pos] = 2.0 * self.added_bit - 1.0
        return term

    def terminal_bits(self) -> np.ndarray:
        return (self.terminal_numeric() > 0).astype(np.int64)

    def states(self, i: int) -> list[State]:
        cur = State.root(self.dim)
        out = [cur]
        for t in range(self.dim):
            value = ONE if self.added_bit[i, t] else ZERO
            cur = cur.with_bit(int(self.added_pos[i, t]), value)
            out.append(cur)
        return out

    def weighted(self, i: int) -> WeightedTrajectory:
        traj = Trajectory.from_states(
            self.states(i), self.step_log_pf[i].copy(), self.step_log_pb[i].copy()
        )
        return WeightedTrajectory(
            traj,
            float(self.step_log_pf[i].sum()),
            float(self.step_log_pb[i].sum()),
            float(self.log_r[i]),
            self.provenance,
        )

    def weighted_list(self) -> list[WeightedTrajectory]:
        return [self.weighted(i) for i in range(self.size)]

    def subset(self, idx: np.ndarray) -> "TrajectoryBatch":
        return TrajectoryBatch(
            self.dim,
            self.added_pos[idx],
            self.added_bit[idx],
            self.step_log_pf[idx],
            self.step_log_pb[idx],
            self.log_r[idx],
            self.provenance,
        )

    @classmethod
    def from_trajectories(
        cls, items: Sequence[WeightedTrajectory] | Sequence[Trajectory], provenance: str = "forward"
    ) -> "TrajectoryBatch":
        trajs = [it.trajectory if isinstance(it, WeightedTrajectory) else it for it in items]
        log_r = np.array(
            [it.log_r if isinstance(it, WeightedTrajectory) else 0.0 for it in items]
        )
        if not trajs:
            raise ValueError("empty batch")
        dim = trajs[0].dim
        return cls(
            dim,
            np.stack([t.added_pos for t in trajs]),
            np.stack([t.added_bit for t in trajs]),
            np.stack([t.step_log_pf for t in trajs]),
            np.stack([t.step_log_pb for t in trajs]),
            log_r,
            provenance,
        )


# -- low-level path walking ------------------------------------------------


def _set_position_table(x: np.ndarray) -> np.ndarray:
    """Set positions per row, shape (n, k); all rows must agree on k."""
    mask = x != 0
    counts = mask.sum(axis=1)
    if counts.size and not (counts == counts[0]).all():
        raise ValueError("rows are at different levels of the DAG")
    _, cols = np.nonzero(mask)
    return cols.reshape(x.shape[0], int(counts[0]) if counts.size else 0)


def _unset_position_table(x: np.ndarray) -> np.ndarray:
    return _set_position_table(np.where(x == 0, 1.0, 0.0))


def _pick(u: np.ndarray, k: int) -> np.ndarray:
    """Uniform index in [0, k) from a unit uniform, safe at u == 1."""
    return np.minimum((u * k).astype(np.int64), k - 1)


def build_steps(
    store: ParameterStore,
    fwd: ForwardPolicy,
    x: np.ndarray,
    k: int,
    *,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
):
    """Sample k forward steps from each row of ``x``.

    Returns (end states, positions (n,k), bits (n,k), step log PF (n,k)).
    ``uniforms`` has shape (n, k, 2): position choice then bit choice.
    """
    x = _as_rows(x).copy()
    n = x.shape[0]
    if uniforms is None:
        uniforms = rng.random((n, k, 2))
    rows = np.arange(n)
    pos_out = np.empty((n, k), dtype=np.int64)
    bit_out = np.empty((n, k), dtype=np.int64)
    lpf = np.empty((n, k))
    for t in range(k):
        unset = _unset_position_table(x)
        n_unset = unset.shape[1]
        pos = unset[rows, _pick(uniforms[:, t, 0], n_unset)]
        lp = fwd.bit_log_probs(store, x, pos)
        bit = (uniforms[:, t, 1] < np.exp(lp[:, 1])).astype(np.int64)
        lpf[:, t] = -np.log(n_unset) + lp[rows, bit]
        x[rows, pos] = 2.0 * bit - 1.0
        pos_out[:, t] = pos
        bit_out[:, t] = bit
    return x, pos_out, bit_out, lpf


def remove_steps(
    store: ParameterStore,
    bwd: BackwardPolicy,
    x: np.ndarray,
    k: int,
    *,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
):
    """Sample k removal steps from each row of ``x``.

    Returns (end states, removed positions (n,k), removed bits (n,k),
    step log PB (n,k)). ``uniforms`` has shape (n, k).
    """
    x = _as_rows(x).copy()
    n = x.shape[0]
    if uniforms is None:
        uniforms = rng.random((n, k))
    rows = np.arange(n)
    pos_out = np.empty((n, k), dtype=np.int64)
    bit_out = np.empty((n, k), dtype=np.int64)
    lpb = np.empty((n, k))
    for t in range(k):
        set_pos = _set_position_table(x)
        n_set = set_pos.shape[1]
        if bwd.has_params:
            lp_rows = bwd.removal_log_probs(store, x)
            probs = np.exp(np.take_along_axis(lp_rows, set_pos, axis=1))
            cums = probs.cumsum(axis=1)
            choice = np.minimum((cums < uniforms[:, t, None]).sum(axis=1), n_set - 1)
            pos = set_pos[rows, choice]
            lpb[:, t] = lp_rows[rows, pos]
        else:
            pos = set_pos[rows, _pick(uniforms[:, t], n_set)]
            lpb[:, t] = -np.log(n_set)
        bit_out[:, t] = (x[rows, pos] > 0).astype(np.int64)
        x[rows, pos] = 0.0
        pos_out[:, t] = pos
    return x, pos_out, bit_out, lpb


def score_build_path(
    store: ParameterStore, fwd: ForwardPolicy, x: np.ndarray, pos: np.ndarray, bit: np.ndarray
) -> np.ndarray:
    """Log PF of following the exact build sequence (pos, bit) from ``x``."""
    x = _as_rows(x).copy()
    n, k = pos.shape
    rows = np.arange(n)
    lpf = np.empty((n, k))
    for t in range(k):
        n_unset = int((x[0] == 0).sum())
        lp = fwd.bit_log_probs(store, x, pos[:, t])
        lpf[:, t] = -np.log(n_unset) + lp[rows, bit[:, t]]
        x[rows, pos[:, t]] = 2.0 * bit[:, t] - 1.0
    return lpf


def score_removal_path(
    store: ParameterStore, bwd: BackwardPolicy, x: np.ndarray, pos: np.ndarray
) -> np.ndarray:
    """Log PB of removing exactly the sequence ``pos`` starting from ``x``."""
    x = _as_rows(x).copy()
    n, k = pos.shape
    rows = np.arange(n)
    lpb = np.empty((n, k))
    for t in range(k):
        lp_rows = bwd.removal_log_probs(store, x)
        lpb[:, t] = lp_rows[rows, pos[:, t]]
        x[rows, pos[:, t]] = 0.0
    return lpb


# -- complete-trajectory samplers -------------------------------------------


def sample_forward_batch(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    n: int,
    *,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
) -> TrajectoryBatch:
    """Ancestral sampling of n trajectories from the forward policy.

    ``uniforms``, when given, has shape (n, dim, 2).
    """
    d = fwd.dim
    root = np.zeros((n, d))
    term, pos, bit, lpf = build_steps(store, fwd, root, d, rng=rng, uniforms=uniforms)
    if bwd.has_params:
        lpb = score_removal_path(store, bwd, term, pos[:, ::-1])[:, ::-1]
    else:
        # Uniform removal: the child after step t has t+1 set bits.
        lpb = np.tile(-np.log(np.arange(1, d + 1.0)), (n, 1))
    log_r = target.log_rewards_numeric(term)
    return TrajectoryBatch(d, pos, bit, lpf, lpb, log_r, "forward")


def sample_backward_batch(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    n: int,
    *,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
    terminals: np.ndarray | None = None,
) -> TrajectoryBatch:
    """Draw terminals from the target and unbuild them with the backward policy.

    ``uniforms``, when given, has shape (n, dim + 1): the first column drives
    the terminal draw (for targets that sample by inverse CDF), the rest the
    removal choices. ``terminals`` (0/1 rows) overrides the terminal draw.
    """
    d = fwd.dim
    if terminals is None:
        terminals = target.sample_terminals(
            n, rng=rng, uniforms=None if uniforms is None else uniforms[:, 0]
        )
    term = 2.0 * np.asarray(terminals, dtype=np.float64) - 1.0
    _, rpos, rbit, rlpb = remove_steps(
        store, bwd, term, d, rng=rng, uniforms=None if uniforms is None else uniforms[:, 1:]
    )
    pos = rpos[:, ::-1].copy()
    bit = rbit[:, ::-1].copy()
    lpb = rlpb[:, ::-1].copy()
    root = np.zeros((n, d))
    lpf = score_build_path(store, fwd, root, pos, bit)
    log_r = target.log_rewards_numeric(term)
    return TrajectoryBatch(d, pos, bit, lpf, lpb, log_r, "backward")


def backward_paths_from(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    terminals: np.ndarray,
    *,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
) -> TrajectoryBatch:
    """Unbuild the given 0/1 terminal rows; log R is left at zero.

    Used by the importance-sampling likelihood estimator, which weighs
    trajectories by log Q - log PB only.
    """
    d = terminals.shape[1]
    n = terminals.shape[0]
    term = 2.0 * np.asarray(terminals, dtype=np.float64) - 1.0
    _, rpos, rbit, rlpb = remove_steps(store, bwd, term, d, rng=rng, uniforms=uniforms)
    pos = rpos[:, ::-1].copy()
    bit = rbit[:, ::-1].copy()
    lpb = rlpb[:, ::-1].copy()
    lpf = score_build_path(store, fwd, np.zeros((n, d)), pos, bit)
    return TrajectoryBatch(d, pos, bit, lpf, lpb, np.zeros(n), "backward")


# -- single-trajectory conveniences -----------------------------------------


def sample_forward(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    rng: np.random.Generator,
) -> WeightedTrajectory:
    return sample_forward_batch(store, fwd, bwd, target, 1, rng=rng).weighted(0)


def sample_backward(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    rng: np.random.Generator,
) -> WeightedTrajectory:
    return sample_backward_batch(store, fwd, bwd, target, 1, rng=rng).weighted(0)


def sample_backward_from(
    store: ParameterStore, bwd: BackwardPolicy, x: State, rng: np.random.Generator
) -> tuple[Trajectory, float]:
    """Unbuild terminating state ``x``; returns the path and its log PB."""
    if not x.is_terminating():
        raise ValueError("backward sampling starts from a terminating state")
    d = x.dim
    term = x.to_numeric()[None, :]
    _, rpos, _, rlpb = remove_steps(store, bwd, term, d, rng=rng)
    states = [x]
    cur = x
    for t in range(d):
        cur = cur.without_bit(int(rpos[0, t]))
        states.append(cur)
    traj = Trajectory.from_states(states[::-1], step_log_pb=rlpb[0, ::-1].copy())
    return traj, float(rlpb.sum())


def forward_step_log_prob(store: ParameterStore, fwd: ForwardPolicy, s: State, s_next: State) -> float:
    """log PF(s_next | s): uniform position choice times the bit softmax."""
    pos, value = added_transition(s, s_next)
    n_unset = s.dim - s.num_set_bits()
    lp = fwd.bit_log_probs(store, s.to_numeric()[None, :], np.array([pos]))
    return float(-np.log(n_unset) + lp[0, 1 if value == ONE else 0])


def backward_step_log_prob(store: ParameterStore, bwd: BackwardPolicy, s_child: State, s_parent: State) -> float:
    """log PB(s_parent | s_child) for a one-bit retraction."""
    pos, _ = added_transition(s_parent, s_child)
    lp = bwd.removal_log_probs(store, s_child.to_numeric()[None, :])
    return float(lp[0, pos])


def trajectory_log_q(store: ParameterStore, fwd: ForwardPolicy, traj: Trajectory) -> float:
    """Re-score log Q of a complete trajectory under the current parameters."""
    batch = TrajectoryBatch.from_trajectories([traj])
    lpf = score_build_path(store, fwd, np.zeros((1, traj.dim)), batch.added_pos, batch.added_bit)
    return float(lpf.sum())


def trajectory_log_pb(store: ParameterStore, bwd: BackwardPolicy, traj: Trajectory) -> float:
    batch = TrajectoryBatch.from_trajectories([traj])
    lpb = score_removal_path(
        store, bwd, batch.terminal_numeric(), batch.added_pos[:, ::-1]
    )
    return float(lpb.sum())


def trajectory_log_flow(
    store: ParameterStore, fwd: ForwardPolicy, traj: Trajectory, psi: float | None = None
) -> float:
    """log of the trajectory flow: log Z_psi + log Q(tau)."""
    if psi is None:
        psi = store.scalar("psi")
    return psi + trajectory_log_q(store, fwd, traj)
