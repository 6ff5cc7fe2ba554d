"""Exact evaluation by dynamic programming, plus sampled estimators.

The oracle enumerates every partial state (3**dim of them) once, scores all
edges with one batched policy evaluation, and then runs log-space dynamic
programs for reach probabilities and backward-visit probabilities. That is
enough to get terminal marginals, both KL divergences, total variation and
exact flows without touching a single sampled trajectory.

For expectations that do not decompose over edges (anything involving the
whole-trajectory balance residual), a second enumerator lists all
dim! * 2**dim complete trajectories and feeds them through the ordinary
batch estimators with probability weights.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .nnet import ParameterStore
from .objectives import (
    EstimatorOutput,
    fkl_gradient_batch,
    rkl_gradient_batch,
    tb_gradient_batch,
)
from .policy import (
    BackwardPolicy,
    ForwardPolicy,
    TrajectoryBatch,
    backward_paths_from,
    score_build_path,
    score_removal_path,
)
from .statespace import all_terminal_bits

__all__ = [
    "STATE_DP_CAP",
    "TRAJECTORY_ENUM_CAP",
    "MetricReport",
    "EnumerationOracle",
    "enumerate_trajectories",
    "log_q_terminal_single",
    "is_marginal_log_likelihood",
    "expected_log_weight",
    "tv_distance",
]

# 3**dim partial states; past this the tables stop being cheap.
STATE_DP_CAP = 12
# dim! * 2**dim complete trajectories.
TRAJECTORY_ENUM_CAP = 6

_NUMERIC_OF_DIGIT = np.array([0.0, -1.0, 1.0])


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass(frozen=True)
class MetricReport:
    log_z: float
    kl_qp: float
    kl_pq: float
    tv: float
    mean_log_weight: float

    @property
    def gap(self) -> float:
        """log Z minus the expected log-weight; equals KL(Q || P)."""
        return self.log_z - self.mean_log_weight


class EnumerationOracle:
    """Exact quantities for one problem size, independent of any sampler.

    States are indexed base-3: digit d is 0 (unset), 1 (bit zero) or 2
    (bit one), so index = sum_d digit_d * 3**d. Construction precomputes
    the numeric rows and the full edge list grouped by level; everything
    parameter-dependent is recomputed per call.
    """

    def __init__(self, dim: int):
        if dim > STATE_DP_CAP:
            raise ValueError(f"state enumeration capped at dim {STATE_DP_CAP}")
        self.dim = dim
        n_states = 3**dim
        idx = np.arange(n_states)
        digits = (idx[:, None] // 3 ** np.arange(dim)[None, :]) % 3
        self.digits = digits
        self.level = (digits != 0).sum(axis=1)
        self.numeric = _NUMERIC_OF_DIGIT[digits]

        parent, child, pos, bit, sibling = [], [], [], [], []
        offset = 0
        for d in range(dim):
            open_d = idx[digits[:, d] == 0]
            k = open_d.size
            for value in (1, 2):
                parent.append(open_d)
                child.append(open_d + value * 3**d)
                pos.append(np.full(k, d))
                bit.append(np.full(k, value - 1))
            # the two value-blocks sit back to back; siblings are k apart
            block = np.arange(offset, offset + k)
            sibling.append(block + k)
            sibling.append(block)
            offset += 2 * k
        self.edge_parent = np.concatenate(parent)
        self.edge_child = np.concatenate(child)
        self.edge_pos = np.concatenate(pos)
        self.edge_bit = np.concatenate(bit)
        sibling = np.concatenate(sibling)
        order = np.argsort(self.level[self.edge_parent], kind="stable")
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        self.edge_sibling = inv[sibling[order]]
        for name in ("edge_parent", "edge_child", "edge_pos", "edge_bit"):
            setattr(self, name, getattr(self, name)[order])
        lv = self.level[self.edge_parent]
        self.edge_level_slices = [
            slice(*np.searchsorted(lv, [t, t + 1])) for t in range(dim)
        ]

        self.terminal_state_idx = idx[self.level == dim]
        term_bits = (self.numeric[self.terminal_state_idx] > 0).astype(np.int64)
        self.terminal_index = term_bits @ (1 << np.arange(dim, dtype=np.int64))

    # -- parameter-dependent edge tables --------------------------------

    def edge_log_pf(self, store: ParameterStore, fwd: ForwardPolicy) -> np.ndarray:
        """Log forward probability of every edge, position factor included."""
        logits = fwd.pair_logits(store, self.numeric)
        if fwd.child_logits:
            raw = logits[self.edge_child, self.edge_pos, self.edge_bit]
            # normalise over the sibling edge at the same (parent, pos)
            lp_bit = raw - np.logaddexp(raw, raw[self.edge_sibling])
        else:
            pair = logits[self.edge_parent, self.edge_pos, :]
            lp_bit = pair[np.arange(pair.shape[0]), self.edge_bit] - np.logaddexp(
                pair[:, 0], pair[:, 1]
            )
        n_open = self.dim - self.level[self.edge_parent]
        return -np.log(n_open) + lp_bit

    def edge_log_pb(self, store: ParameterStore, bwd: BackwardPolicy) -> np.ndarray:
        if not bwd.has_params:
            return -np.log(self.level[self.edge_child].astype(np.float64))
        table = bwd.removal_log_probs(store, self.numeric[self.edge_child])
        return table[np.arange(self.edge_child.size), self.edge_pos]

    # -- dynamic programs ------------------------------------------------

    def reach_log_probs(self, store: ParameterStore, fwd: ForwardPolicy) -> np.ndarray:
        """Log probability that the forward chain visits each state."""
        lpf = self.edge_log_pf(store, fwd)
        lr = np.full(3**self.dim, -np.inf)
        lr[0] = 0.0
        for sl in self.edge_level_slices:
            np.logaddexp.at(lr, self.edge_child[sl], lr[self.edge_parent[sl]] + lpf[sl])
        return lr

    def terminal_log_q(self, store: ParameterStore, fwd: ForwardPolicy) -> np.ndarray:
        """Exact sampler marginal over terminals, indexed by terminal integer."""
        lr = self.reach_log_probs(store, fwd)
        out = np.empty(1 << self.dim)
        out[self.terminal_index] = lr[self.terminal_state_idx]
        return out

    def backward_visit_log_probs(
        self, store: ParameterStore, bwd: BackwardPolicy, log_pi_terminal: np.ndarray
    ) -> np.ndarray:
        """Log probability that the backward chain from pi visits each state."""
        lpb = self.edge_log_pb(store, bwd)
        lm = np.full(3**self.dim, -np.inf)
        lm[self.terminal_state_idx] = log_pi_terminal[self.terminal_index]
        for sl in reversed(self.edge_level_slices):
            np.logaddexp.at(lm, self.edge_parent[sl], lm[self.edge_child[sl]] + lpb[sl])
        return lm

    # -- exact divergences and flows --------------------------------------

    def target_log_z(self, target) -> float:
        logr = self._terminal_log_r(target)
        top = logr.max()
        return float(top + np.log(np.exp(logr - top).sum()))

    def _terminal_log_r(self, target) -> np.ndarray:
        out = np.empty(1 << self.dim)
        out[self.terminal_index] = target.log_rewards_numeric(
            self.numeric[self.terminal_state_idx]
        )
        return out

    def divergences(
        self,
        store: ParameterStore,
        fwd: ForwardPolicy,
        bwd: BackwardPolicy,
        target,
    ) -> MetricReport:
        """Both trajectory-level KLs, terminal TV, and the mean log-weight.

        Expectations of per-step quantities reduce to sums over edges
        weighted by exact visit probabilities, so no trajectory is ever
        enumerated.
        """
        lpf = self.edge_log_pf(store, fwd)
        lpb = self.edge_log_pb(store, bwd)

        lr = np.full(3**self.dim, -np.inf)
        lr[0] = 0.0
        for sl in self.edge_level_slices:
            np.logaddexp.at(lr, self.edge_child[sl], lr[self.edge_parent[sl]] + lpf[sl])

        log_r_term = self._terminal_log_r(target)
        log_z = self.target_log_z(target)
        log_pi = log_r_term - log_z

        lm = np.full(3**self.dim, -np.inf)
        lm[self.terminal_state_idx] = log_pi[self.terminal_index]
        for sl in reversed(self.edge_level_slices):
            np.logaddexp.at(lm, self.edge_parent[sl], lm[self.edge_child[sl]] + lpb[sl])

        visit_q = np.exp(lr[self.edge_parent] + lpf)
        visit_p = np.exp(lm[self.edge_child] + lpb)

        e_q_log_pf = float(visit_q @ lpf)
        e_q_log_pb = float(visit_q @ lpb)
        e_p_log_pf = float(visit_p @ lpf)
        e_p_log_pb = float(visit_p @ lpb)

        q_term = np.empty(1 << self.dim)
        q_term[self.terminal_index] = np.exp(lr[self.terminal_state_idx])
        pi_term = np.exp(log_pi)

        # mask the log factor where the weight is zero so 0 * -inf never forms
        e_q_log_r = float(q_term @ np.where(q_term > 0, log_r_term, 0.0))
        mean_logw = e_q_log_r + e_q_log_pb - e_q_log_pf
        kl_qp = log_z - mean_logw
        e_p_log_pi = float(pi_term @ np.where(pi_term > 0, log_pi, 0.0))
        kl_pq = e_p_log_pi + e_p_log_pb - e_p_log_pf
        tv = tv_distance(q_term, pi_term)
        return MetricReport(log_z, kl_qp, kl_pq, tv, mean_logw)

    def exact_flows(
        self, store: ParameterStore, fwd: ForwardPolicy, psi: float
    ) -> np.ndarray:
        """Flow through each state: exp(psi) times the visit probability."""
        return np.exp(psi + self.reach_log_probs(store, fwd))

    def flows_by_trajectory_sum(
        self, store: ParameterStore, fwd: ForwardPolicy, bwd: BackwardPolicy, psi: float
    ) -> np.ndarray:
        """Definitional route: sum exp(psi) Q(tau) over trajectories through s.

        Exponential in dim; exists to cross-check exact_flows.
        """
        batch = enumerate_trajectories(store, fwd, bwd, None, self.dim)
        q = np.exp(psi + batch.log_q)
        flows = np.zeros(3**self.dim)
        pow3 = 3 ** np.arange(self.dim)
        s_idx = np.zeros(batch.size, dtype=np.int64)
        np.add.at(flows, s_idx, q)  # root
        for t in range(self.dim):
            s_idx = s_idx + (batch.added_bit[:, t] + 1) * pow3[batch.added_pos[:, t]]
            np.add.at(flows, s_idx, q)
        return flows

    # -- exact expected gradients ------------------------------------------

    def _weighted_batch(
        self, store, fwd, bwd, target
    ) -> tuple[TrajectoryBatch, np.ndarray, np.ndarray]:
        batch = enumerate_trajectories(store, fwd, bwd, target, self.dim)
        q = np.exp(batch.log_q)
        log_z = self.target_log_z(target)
        p = np.exp(batch.log_r - log_z + batch.log_pb)
        return batch, q, p

    def expected_tb_gradient(
        self,
        store,
        fwd: ForwardPolicy,
        bwd: BackwardPolicy,
        target,
        psi: float,
        measure: str = "forward",
    ) -> EstimatorOutput:
        """Exact expectation of the squared-residual gradient.

        ``measure`` selects the trajectory distribution the expectation is
        taken under: the sampler itself ("forward") or the target-tied
        reverse process ("backward").
        """
        batch, q, p = self._weighted_batch(store, fwd, bwd, target)
        if measure not in ("forward", "backward"):
            raise ValueError(f"unknown measure {measure!r}")
        w = q if measure == "forward" else p
        return tb_gradient_batch(store, fwd, bwd, batch, psi=psi, sample_weights=w)

    def exact_rkl_gradient(
        self, store, fwd: ForwardPolicy, bwd: BackwardPolicy, target
    ) -> EstimatorOutput:
        """The true gradient of KL(Q || P); score terms cancel exactly."""
        batch, q, _ = self._weighted_batch(store, fwd, bwd, target)
        fb = TrajectoryBatch(
            batch.dim,
            batch.added_pos,
            batch.added_bit,
            batch.step_log_pf,
            batch.step_log_pb,
            batch.log_r,
            "forward",
        )
        return rkl_gradient_batch(store, fwd, bwd, fb, cv="fixed", cv_fixed=0.0, sample_weights=q)

    def exact_fkl_gradient(
        self, store, fwd: ForwardPolicy, bwd: BackwardPolicy, target
    ) -> EstimatorOutput:
        batch, _, p = self._weighted_batch(store, fwd, bwd, target)
        bb = TrajectoryBatch(
            batch.dim,
            batch.added_pos,
            batch.added_bit,
            batch.step_log_pf,
            batch.step_log_pb,
            batch.log_r,
            "backward",
        )
        return fkl_gradient_batch(store, fwd, bwd, bb, cv="fixed", cv_fixed=0.0, sample_weights=p)


def enumerate_trajectories(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    dim: int,
) -> TrajectoryBatch:
    """Every complete trajectory, scored under the current policies.

    dim! orderings times 2**dim bit patterns. ``target`` may be None, in
    which case the rewards are left at zero.
    """
    if dim > TRAJECTORY_ENUM_CAP:
        raise ValueError(f"trajectory enumeration capped at dim {TRAJECTORY_ENUM_CAP}")
    perms = np.array(list(itertools.permutations(range(dim))), dtype=np.int64)
    patterns = all_terminal_bits(dim).astype(np.int64)
    pos = np.repeat(perms, patterns.shape[0], axis=0)
    bvec = np.tile(patterns, (perms.shape[0], 1))
    bit = np.take_along_axis(bvec, pos, axis=1)
    n = pos.shape[0]
    lpf = score_build_path(store, fwd, np.zeros((n, dim)), pos, bit)
    if bwd.has_params:
        term = 2.0 * bvec.astype(np.float64) - 1.0
        lpb = score_removal_path(store, bwd, term, pos[:, ::-1])[:, ::-1]
    else:
        lpb = np.tile(-np.log(np.arange(1, dim + 1.0)), (n, 1))
    log_r = (
        np.zeros(n)
        if target is None
        else target.log_rewards_numeric(2.0 * bvec.astype(np.float64) - 1.0)
    )
    return TrajectoryBatch(dim, pos, bit, lpf, lpb, log_r, "forward")


def log_q_terminal_single(
    store: ParameterStore, fwd: ForwardPolicy, x_bits: np.ndarray
) -> float:
    """Marginal log Q of one terminal by dynamic programming over subsets.

    Partial states on any path to x fix a subset of x's positions at x's
    values, so a DP over the 2**dim subsets suffices. Kept separate from
    the full-state oracle as an independent route to the same number.
    """
    x_bits = np.asarray(x_bits).ravel()
    dim = x_bits.size
    x_num = 2.0 * x_bits - 1.0
    lq = np.full(1 << dim, -np.inf)
    lq[0] = 0.0
    masks = np.arange(1 << dim)
    by_count = np.argsort(np.array([int(m).bit_count() for m in masks]), kind="stable")
    for m in by_count:
        m = int(m)
        if lq[m] == -np.inf:
            continue
        k = m.bit_count()
        if k == dim:
            continue
        rows = []
        posns = []
        for d in range(dim):
            if not m & (1 << d):
                posns.append(d)
        state = np.where((masks[m] >> np.arange(dim)) & 1, x_num, 0.0)
        batch = np.tile(state, (len(posns), 1))
        lp = fwd.bit_log_probs(store, batch, np.array(posns))
        for i, d in enumerate(posns):
            step = -np.log(dim - k) + lp[i, int(x_bits[d])]
            child = m | (1 << d)
            lq[child] = np.logaddexp(lq[child], lq[m] + step)
    return float(lq[(1 << dim) - 1])


def is_marginal_log_likelihood(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    x_bits: np.ndarray,
    n_paths: int = 100,
    *,
    rng: np.random.Generator,
    chunk: int = 128,
) -> np.ndarray:
    """Importance-sampled log Q(x) for each 0/1 row of ``x_bits``.

    Each point gets n_paths backward paths; the estimate is
    logmeanexp(log Q - log PB) over them. With a uniform backward policy
    and a uniform forward policy every path gives the same ratio and the
    estimator is exact with one path.
    """
    x_bits = np.atleast_2d(np.asarray(x_bits))
    m = x_bits.shape[0]
    out = np.empty(m)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        rep = np.repeat(x_bits[lo:hi], n_paths, axis=0)
        batch = backward_paths_from(store, fwd, bwd, rep, rng=rng)
        ratios = (batch.log_q - batch.log_pb).reshape(hi - lo, n_paths)
        top = ratios.max(axis=1)
        out[lo:hi] = top + np.log(np.exp(ratios - top[:, None]).mean(axis=1))
    return out


def expected_log_weight(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    n: int,
    *,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the log-weight under Q."""
    from .policy import sample_forward_batch

    batch = sample_forward_batch(store, fwd, bwd, target, n, rng=rng)
    logw = batch.log_weight
    return float(logw.mean()), float(logw.std(ddof=1) / np.sqrt(n))
