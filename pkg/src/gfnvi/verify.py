"""Self-contained invariant checks for the verify subcommand.

Each check builds its own small fixture, so the suite runs in well under a
second and needs no prior training artifacts. A check returns its name, a
pass flag, and a short detail string with the measured quantity.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import seeds
from .evaluate import EnumerationOracle
from .nnet import MlpSpec, ParameterStore, init_mlp, load_checkpoint, save_checkpoint
from .objectives import tb_gradient_batch
from .policy import (
    BackwardPolicy,
    ForwardPolicy,
    TrajectoryBatch,
    sample_forward_batch,
    score_build_path,
    score_removal_path,
)
from .statespace import cell_to_state, state_to_cell
from .targets import TabularTarget, build_density, mh_back_forth_step

__all__ = ["CheckResult", "run_checks"]

_DIM = 4
_TOL_EXACT = 1e-10
_TOL_FD = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _fixture(seed: int):
    spec = MlpSpec(_DIM, (16,), 2 * _DIM)
    bspec = MlpSpec(_DIM, (16,), _DIM)
    fwd = ForwardPolicy(_DIM, spec)
    bwd = BackwardPolicy(_DIM, "learned", bspec, "theta")
    store = ParameterStore({"phi": spec.n_params, "theta": bspec.n_params, "psi": 1})
    rng = seeds.stream(seed, "verify")
    store.view("phi")[:] = init_mlp(spec, rng)
    store.view("theta")[:] = init_mlp(bspec, rng)
    store.set_scalar("psi", 0.25)
    logm = rng.normal(size=1 << _DIM)
    target = TabularTarget(_DIM, logm)
    return store, fwd, bwd, target


def _random_partial_states(rng, n: int) -> np.ndarray:
    levels = rng.integers(0, _DIM, size=n)  # strictly below terminal
    x = np.zeros((n, _DIM))
    for i, k in enumerate(levels):
        posns = rng.permutation(_DIM)[:k]
        x[i, posns] = rng.choice([-1.0, 1.0], size=k)
    return x


def _check_forward_normalisation(store, fwd, rng) -> CheckResult:
    worst = 0.0
    x = _random_partial_states(rng, 32)
    for row in x:
        open_pos = np.flatnonzero(row == 0.0)
        total = 0.0
        for d in open_pos:
            rows = row[None, :]
            lp = fwd.bit_log_probs(store, rows, np.array([d]))[0]
            total += np.exp(lp).sum() / open_pos.size
        worst = max(worst, abs(total - 1.0))
    ok = worst < _TOL_EXACT
    return CheckResult("forward-normalisation", ok, f"max |sum - 1| = {worst:.3e}")


def _check_backward_normalisation(store, bwd, rng) -> CheckResult:
    x = _random_partial_states(rng, 32)
    x[(x == 0.0).all(axis=1), 0] = 1.0  # backward is undefined at the root
    lp = bwd.removal_log_probs(store, x)
    sums = np.where(np.isfinite(lp), np.exp(lp), 0.0).sum(axis=1)
    worst = float(np.abs(sums - 1.0).max())
    ok = worst < _TOL_EXACT
    return CheckResult("backward-normalisation", ok, f"max |sum - 1| = {worst:.3e}")


def _check_terminal_marginal(store, fwd) -> CheckResult:
    oracle = EnumerationOracle(_DIM)
    lq = oracle.terminal_log_q(store, fwd)
    top = lq.max()
    lse = top + np.log(np.exp(lq - top).sum())
    ok = abs(lse) < _TOL_EXACT
    return CheckResult("terminal-marginal", ok, f"|logsumexp| = {abs(lse):.3e}")


def _check_score_consistency(store, fwd, bwd, target, rng) -> CheckResult:
    batch = sample_forward_batch(store, fwd, bwd, target, 16, rng=rng)
    lpf = score_build_path(
        store, fwd, np.zeros((16, _DIM)), batch.added_pos, batch.added_bit
    ).sum(axis=1)
    lpb = score_removal_path(
        store, bwd, batch.terminal_numeric(), batch.added_pos[:, ::-1]
    )[:, ::-1].sum(axis=1)
    worst = max(
        float(np.abs(lpf - batch.log_q).max()), float(np.abs(lpb - batch.log_pb).max())
    )
    ok = worst < _TOL_EXACT
    return CheckResult("path-score-consistency", ok, f"max |resample - sample| = {worst:.3e}")


def _check_checkpoint_roundtrip(store) -> CheckResult:
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ck.gfnck")
        save_checkpoint(path, store, {"note": "verify"})
        loaded, header = load_checkpoint(path)
    same_values = np.array_equal(loaded.values, store.values)
    same_slices = all(loaded.bounds(n) == store.bounds(n) for n in store.names)
    ok = same_values and same_slices
    return CheckResult("checkpoint-roundtrip", ok, f"values equal: {same_values}")


def _check_stream_determinism(seed) -> CheckResult:
    a = seeds.uniform_block(seed, "forward", 7, (3, 4))
    b = seeds.uniform_block(seed, "forward", 7, (3, 4))
    c = seeds.uniform_block(seed, "backward", 7, (3, 4))
    ok = np.array_equal(a, b) and not np.array_equal(a, c)
    return CheckResult("stream-determinism", ok, "same key repeats, keys separate")


def _check_gradient(store, fwd, bwd, target, rng, corrupt: bool) -> CheckResult:
    batch = sample_forward_batch(store, fwd, bwd, target, 8, rng=rng)
    out = tb_gradient_batch(store, fwd, bwd, batch)
    grad = out.gradient.copy()
    if corrupt:
        grad[store.bounds("psi")[0]] += 0.5

    def loss_at(values: np.ndarray) -> float:
        probe = ParameterStore({n: store.bounds(n)[1] - store.bounds(n)[0] for n in store.names})
        probe.values[:] = values
        lpf = score_build_path(
            probe, fwd, np.zeros((batch.size, _DIM)), batch.added_pos, batch.added_bit
        )
        lpb = score_removal_path(
            probe, bwd, batch.terminal_numeric(), batch.added_pos[:, ::-1]
        )[:, ::-1]
        rescored = TrajectoryBatch(
            _DIM, batch.added_pos, batch.added_bit, lpf, lpb, batch.log_r, "forward"
        )
        delta = probe.scalar("psi") - rescored.log_weight
        return float(np.mean(delta * delta))

    h = 1e-5
    probes = list(rng.choice(len(store), size=24, replace=False))
    probes.append(store.bounds("psi")[0])
    worst = 0.0
    for j in probes:
        shifted = store.values.copy()
        shifted[j] += h
        up = loss_at(shifted)
        shifted[j] -= 2 * h
        down = loss_at(shifted)
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grad[j]) / max(1.0, abs(fd)))
    ok = worst < _TOL_FD
    return CheckResult("gradient-check", ok, f"max rel err = {worst:.3e}")


def _check_density_normalisation() -> CheckResult:
    density = build_density("8gaussians", 3)
    p = density.probabilities()
    err = abs(float(p.sum()) - 1.0)
    ok = err < _TOL_EXACT and np.all(np.isfinite(density.terminal_log_mass))
    return CheckResult("density-normalisation", ok, f"|sum - 1| = {err:.3e}")


def _check_gray_adjacency() -> CheckResult:
    bits = 3
    ok = True
    for i in range((1 << bits) - 1):
        a = cell_to_state((i, 0), bits)
        b = cell_to_state((i + 1, 0), bits)
        differing = sum(x != y for x, y in zip(a.bits, b.bits))
        ok = ok and differing == 1
        ok = ok and state_to_cell(a, bits) == (i, 0)
    return CheckResult("gray-adjacency", ok, "axis neighbours differ in one bit")


def _check_mh_uniform(rng) -> CheckResult:
    # zero nets make both policies uniform; a flat reward then accepts always
    spec = MlpSpec(_DIM, (8,), 2 * _DIM)
    fwd = ForwardPolicy(_DIM, spec)
    bwd = BackwardPolicy(_DIM, "uniform")
    store = ParameterStore({"phi": spec.n_params, "psi": 1})
    x = 2.0 * (rng.random((16, _DIM)) < 0.5) - 1.0
    _, accept, log_ratio = mh_back_forth_step(
        store, fwd, bwd, lambda t: np.zeros(t.shape[0]), x, 2, rng=rng
    )
    worst = float(np.abs(log_ratio).max())
    ok = bool(accept.all()) and worst < _TOL_EXACT
    return CheckResult("mh-flat-acceptance", ok, f"max |log ratio| = {worst:.3e}")


def run_checks(seed: int = 0, *, corrupt_psi_grad: bool = False) -> list[CheckResult]:
    store, fwd, bwd, target = _fixture(seed)
    rng = seeds.stream(seed, "verify", 1)
    return [
        _check_forward_normalisation(store, fwd, rng),
        _check_backward_normalisation(store, bwd, rng),
        _check_terminal_marginal(store, fwd),
        _check_score_consistency(store, fwd, bwd, target, rng),
        _check_checkpoint_roundtrip(store),
        _check_stream_determinism(seed),
        _check_gradient(store, fwd, bwd, target, rng, corrupt_psi_grad),
        _check_density_normalisation(),
        _check_gray_adjacency(),
        _check_mh_uniform(rng),
    ]
