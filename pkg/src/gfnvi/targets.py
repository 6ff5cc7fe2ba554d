"""Reward targets over binary terminal states, plus MCMC and CD machinery.

A target exposes ``dim``, ``log_rewards_numeric`` on batches of -1/+1 rows,
and where possible ``sample_terminals`` / ``log_z``. Rewards are unnormalised
masses; the normaliser is what training estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nnet import MlpSpec, ParameterStore, mlp_backward, mlp_forward
from .policy import build_steps, remove_steps, score_build_path, score_removal_path
from .statespace import all_terminal_bits
from . import seeds

__all__ = [
    "MASS_FLOOR",
    "NoTerminalSamplerError",
    "TabularTarget",
    "DiscretizedDensity",
    "grid_index_table",
    "build_density",
    "export_density",
    "load_density",
    "IsingTarget",
    "EnergyModel",
    "sample_dataset",
    "mh_back_forth_step",
    "mh_back_forth_single",
    "cd_gradient_step",
    "exact_energy_gradient",
    "exact_model_distribution",
]

# Cells with no appreciable density still need a finite log-reward.
MASS_FLOOR = 1e-30

# Enumerating 2**dim terminals stays cheap up to here.
_ENUM_CAP = 20


class NoTerminalSamplerError(RuntimeError):
    """The target cannot produce exact terminal samples."""


def _bits_from_index(idx: np.ndarray, dim: int) -> np.ndarray:
    return ((np.asarray(idx).reshape(-1, 1) >> np.arange(dim)) & 1).astype(np.int8)


def _index_from_numeric(x: np.ndarray, dim: int) -> np.ndarray:
    bits = (np.asarray(x) > 0).astype(np.int64)
    return bits @ (1 << np.arange(dim, dtype=np.int64))


def _inverse_cdf_sample(probs, n, dim, rng, uniforms):
    if uniforms is None:
        if rng is None:
            raise ValueError("terminal sampling needs rng or uniforms")
        uniforms = rng.random(n)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, np.asarray(uniforms)[:n], side="right")
    return _bits_from_index(np.minimum(idx, probs.size - 1), dim)


class TabularTarget:
    """Arbitrary log-masses indexed by the terminal integer encoding."""

    def __init__(self, dim: int, log_masses: np.ndarray):
        log_masses = np.asarray(log_masses, dtype=np.float64)
        if log_masses.shape != (1 << dim,):
            raise ValueError("need one log-mass per terminal state")
        self.dim = dim
        self.log_masses = log_masses
        top = log_masses.max()
        self._log_z = float(top + np.log(np.exp(log_masses - top).sum()))

    def log_z(self) -> float:
        return self._log_z

    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_masses - self._log_z)

    def log_rewards_numeric(self, x: np.ndarray) -> np.ndarray:
        return self.log_masses[_index_from_numeric(x, self.dim)]

    def sample_terminals(self, n, *, rng=None, uniforms=None) -> np.ndarray:
        return _inverse_cdf_sample(self.probabilities(), n, self.dim, rng, uniforms)


def _gray_codes(n: np.ndarray) -> np.ndarray:
    return n ^ (n >> 1)


def _bit_reverse(v: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros_like(v)
    for b in range(width):
        out |= ((v >> (width - 1 - b)) & 1) << b
    return out


def grid_index_table(bits_per_dim: int) -> np.ndarray:
    """Terminal integer index of each grid cell, shape (2**b, 2**b).

    Cell (i, j) maps to the state whose first b bits are the Gray code of i
    (most significant first) and the next b the Gray code of j.
    """
    n = 1 << bits_per_dim
    rev_gray = _bit_reverse(_gray_codes(np.arange(n)), bits_per_dim)
    return rev_gray[:, None] + (rev_gray[None, :] << bits_per_dim)


@dataclass
class DiscretizedDensity:
    """A 2-D density binned onto a Gray-coded square grid.

    Cell (i, j) covers the square of side 2*extent/2**bits_per_dim whose
    lower-left corner sits at (-extent + i*w, -extent + j*w). The state's
    first bits_per_dim bits hold the Gray code of i, most significant first,
    so adjacent cells differ in one bit along each axis.
    """

    bits_per_dim: int
    cell_log_mass: np.ndarray
    extent: float = 4.0
    source: str = "custom"

    def __post_init__(self) -> None:
        n = 1 << self.bits_per_dim
        if self.cell_log_mass.shape != (n, n):
            raise ValueError("cell grid does not match bits_per_dim")
        self.dim = 2 * self.bits_per_dim
        idx = grid_index_table(self.bits_per_dim)
        table = np.empty(1 << self.dim)
        table[idx.ravel()] = self.cell_log_mass.ravel()
        self.terminal_log_mass = table
        top = table.max()
        self._log_z = float(top + np.log(np.exp(table - top).sum()))

    def log_z(self) -> float:
        return self._log_z

    def probabilities(self) -> np.ndarray:
        return np.exp(self.terminal_log_mass - self._log_z)

    def log_rewards_numeric(self, x: np.ndarray) -> np.ndarray:
        return self.terminal_log_mass[_index_from_numeric(x, self.dim)]

    def sample_terminals(self, n, *, rng=None, uniforms=None) -> np.ndarray:
        return _inverse_cdf_sample(self.probabilities(), n, self.dim, rng, uniforms)

    def cell_centers(self) -> np.ndarray:
        n = 1 << self.bits_per_dim
        w = 2.0 * self.extent / n
        c = -self.extent + (np.arange(n) + 0.5) * w
        return c


def _eight_gaussians_log_mass(xy: np.ndarray, sigma: float) -> np.ndarray:
    k = np.arange(8)
    mu = 2.0 * np.stack([np.cos(k * np.pi / 4), np.sin(k * np.pi / 4)], axis=1)
    d2 = ((xy[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    return np.log(np.maximum(np.exp(-d2 / (2 * sigma * sigma)).sum(axis=1), MASS_FLOOR))


def _two_spirals_log_mass(xy: np.ndarray, sigma: float, n_curve: int) -> np.ndarray:
    t = np.linspace(0.0, 3 * np.pi, n_curve)
    r = 4.0 * t / (3 * np.pi)
    arm = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    pts = np.concatenate([arm, -arm])
    out = np.empty(xy.shape[0])
    for lo in range(0, xy.shape[0], 2048):
        hi = min(lo + 2048, xy.shape[0])
        d2 = ((xy[lo:hi, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        out[lo:hi] = np.exp(-d2 / (2 * sigma * sigma)).sum(axis=1)
    return np.log(np.maximum(out, MASS_FLOOR))


def build_density(
    name: str,
    bits_per_dim: int,
    *,
    sigma: float | None = None,
    n_curve: int = 2048,
    extent: float = 4.0,
) -> DiscretizedDensity:
    """Evaluate a named planar density at the cell centers of the grid.

    "8gaussians": eight unit-weight isotropic bumps (default sigma 0.3) on a
    circle of radius 2. "2spirals": two interleaved Archimedean arms traced
    by n_curve points and smoothed with a Gaussian kernel (default sigma
    0.15); the second arm is the first rotated by pi.
    """
    n = 1 << bits_per_dim
    c = -extent + (np.arange(n) + 0.5) * (2.0 * extent / n)
    gx, gy = np.meshgrid(c, c, indexing="ij")
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if name == "8gaussians":
        logm = _eight_gaussians_log_mass(xy, 0.3 if sigma is None else sigma)
    elif name == "2spirals":
        logm = _two_spirals_log_mass(xy, 0.15 if sigma is None else sigma, n_curve)
    else:
        raise ValueError(f"unknown density {name!r}")
    return DiscretizedDensity(bits_per_dim, logm.reshape(n, n), extent, name)


def export_density(density: DiscretizedDensity, path_prefix: str) -> None:
    """Write the cell grid as raw little-endian float64 plus a JSON sidecar."""
    raw = density.cell_log_mass.astype("<f8").tobytes()
    with open(path_prefix + ".f64", "wb") as fh:
        fh.write(raw)
    meta = {
        "format": "gfnvi-density-1",
        "dtype": "float64",
        "byte_order": "little",
        "bits_per_dim": density.bits_per_dim,
        "shape": list(density.cell_log_mass.shape),
        "extent": density.extent,
        "source": density.source,
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_density(path_prefix: str) -> DiscretizedDensity:
    # accept either the export prefix or one of the two emitted paths
    for suffix in (".json", ".f64"):
        if path_prefix.endswith(suffix):
            path_prefix = path_prefix[: -len(suffix)]
    with open(path_prefix + ".json") as fh:
        meta = json.load(fh)
    if meta.get("format") != "gfnvi-density-1":
        raise ValueError("not a density export")
    grid = np.fromfile(path_prefix + ".f64", dtype="<f8").reshape(meta["shape"])
    return DiscretizedDensity(
        meta["bits_per_dim"], grid, meta.get("extent", 4.0), meta.get("source", "custom")
    )


class IsingTarget:
    """Pairwise spin model log R(x) = (beta/2) x^T A x on -1/+1 spins."""

    def __init__(self, adjacency: np.ndarray, beta: float):
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(adjacency, adjacency.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(adjacency)):
            raise ValueError("adjacency must have an empty diagonal")
        self.adjacency = adjacency
        self.beta = float(beta)
        self.dim = adjacency.shape[0]
        self._probs = None

    @classmethod
    def torus(cls, n: int, beta: float) -> "IsingTarget":
        """Four-neighbour lattice on an n x n torus; n >= 3 keeps edges simple."""
        if n < 3:
            raise ValueError("torus needs n >= 3")
        a = np.zeros((n * n, n * n))
        for r in range(n):
            for c in range(n):
                v = r * n + c
                a[v, ((r + 1) % n) * n + c] = 1
                a[v, ((r - 1) % n) * n + c] = 1
                a[v, r * n + (c + 1) % n] = 1
                a[v, r * n + (c - 1) % n] = 1
        return cls(a, beta)

    def energies(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return -0.5 * np.einsum("ni,ij,nj->n", x, self.adjacency, x)

    def log_rewards_numeric(self, x: np.ndarray) -> np.ndarray:
        return -self.beta * self.energies(x)

    def _enumerate(self):
        if self.dim > _ENUM_CAP:
            raise NoTerminalSamplerError(f"cannot enumerate 2**{self.dim} spin states")
        if self._probs is None:
            spins = 2.0 * all_terminal_bits(self.dim) - 1.0
            logm = self.log_rewards_numeric(spins)
            top = logm.max()
            self._log_z = float(top + np.log(np.exp(logm - top).sum()))
            self._probs = np.exp(logm - self._log_z)
        return self._probs

    def log_z(self) -> float:
        self._enumerate()
        return self._log_z

    def sample_terminals(self, n, *, rng=None, uniforms=None) -> np.ndarray:
        return _inverse_cdf_sample(self._enumerate(), n, self.dim, rng, uniforms)


class EnergyModel:
    """A learned scalar energy on terminal states; log R = -energy.

    The parameters live in a named store slice so the energy can be trained
    jointly with the sampler. ``bound`` freezes a store view into a target
    usable by the samplers.
    """

    def __init__(self, dim: int, hidden=(64, 64), slice_name: str = "xi"):
        self.dim = dim
        self.slice_name = slice_name
        self.spec = MlpSpec(dim, tuple(hidden), 1)

    def energies(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return mlp_forward(self.spec, store.view(self.slice_name), x)[:, 0]

    def log_rewards_numeric(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        return -self.energies(store, x)

    def energy_param_grad(
        self, store: ParameterStore, x: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        """Gradient of sum_n weights_n * energy(x_n) w.r.t. the slice."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        up = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        grad, _ = mlp_backward(self.spec, store.view(self.slice_name), x, up)
        return grad

    def bound(self, store: ParameterStore) -> "_BoundEnergy":
        return _BoundEnergy(self, store)


class _BoundEnergy:
    def __init__(self, model: EnergyModel, store: ParameterStore):
        self.model = model
        self.store = store
        self.dim = model.dim

    def log_rewards_numeric(self, x: np.ndarray) -> np.ndarray:
        return self.model.log_rewards_numeric(self.store, x)

    def sample_terminals(self, n, *, rng=None, uniforms=None):
        raise NoTerminalSamplerError("a learned energy has no exact terminal sampler")


def exact_model_distribution(store: ParameterStore, model: EnergyModel) -> TabularTarget:
    """Enumerated Boltzmann distribution of the current energy (small dim)."""
    if model.dim > _ENUM_CAP:
        raise NoTerminalSamplerError(f"cannot enumerate 2**{model.dim} terminals")
    spins = 2.0 * all_terminal_bits(model.dim) - 1.0
    return TabularTarget(model.dim, model.log_rewards_numeric(store, spins))


def sample_dataset(target, n: int, seed: int) -> np.ndarray:
    """Draw a reproducible 0/1 dataset from a target's exact sampler."""
    rng = seeds.stream(seed, "dataset")
    return target.sample_terminals(n, rng=rng)


# -- back-and-forth Metropolis-Hastings --------------------------------------


def mh_back_forth_step(
    store: ParameterStore,
    fwd,
    bwd,
    log_reward_fn,
    x: np.ndarray,
    k_back: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    uniforms: tuple | None = None,
):
    """One proposal per chain: unbuild k_back bits, rebuild, accept or keep.

    ``x`` holds -1/+1 terminal rows. The proposal density is backward-
    then-forward; the acceptance ratio scores the reverse move along the
    same intermediate state, so detailed balance holds exactly:

        a = min(1, R(y) PB(y->z) PF(z->x) / (R(x) PB(x->z) PF(z->y)))

    ``uniforms`` = (removal (n,k), build (n,k,2), accept (n,)). Returns
    (new states, accepted mask, log acceptance ratio).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, dim = x.shape
    if k_back is None:
        k_back = (dim + 1) // 2
    if uniforms is None:
        if rng is None:
            raise ValueError("mh step needs rng or uniforms")
        u_rm = u_bd = None
        u_acc = None
    else:
        u_rm, u_bd, u_acc = uniforms

    z, rm_pos, rm_bit, step_lpb = remove_steps(store, bwd, x, k_back, rng=rng, uniforms=u_rm)
    y, bd_pos, bd_bit, step_lpf = build_steps(store, fwd, z, k_back, rng=rng, uniforms=u_bd)

    lpb_x_to_z = step_lpb.sum(axis=1)
    lpf_z_to_y = step_lpf.sum(axis=1)
    lpb_y_to_z = score_removal_path(store, bwd, y, bd_pos[:, ::-1]).sum(axis=1)
    lpf_z_to_x = score_build_path(store, fwd, z, rm_pos[:, ::-1], rm_bit[:, ::-1]).sum(axis=1)

    log_ratio = (
        log_reward_fn(y)
        + lpb_y_to_z
        + lpf_z_to_x
        - log_reward_fn(x)
        - lpb_x_to_z
        - lpf_z_to_y
    )
    if u_acc is None:
        u_acc = rng.random(n)
    accept = np.log(np.asarray(u_acc)[:n]) < log_ratio
    out = np.where(accept[:, None], y, x)
    return out, accept, log_ratio


def mh_back_forth_single(
    store: ParameterStore,
    fwd,
    bwd,
    log_reward_fn,
    x_bits: np.ndarray,
    k_back: int | None = None,
    *,
    rng: np.random.Generator,
):
    """Single-chain convenience wrapper over 0/1 bit vectors."""
    x = 2.0 * np.asarray(x_bits, dtype=np.float64).reshape(1, -1) - 1.0
    out, accept, log_ratio = mh_back_forth_step(
        store, fwd, bwd, log_reward_fn, x, k_back, rng=rng
    )
    return (out[0] > 0).astype(np.int8), bool(accept[0]), float(log_ratio[0])


def cd_gradient_step(
    store: ParameterStore,
    model: EnergyModel,
    fwd,
    bwd,
    data_bits: np.ndarray,
    *,
    k_cd: int = 1,
    k_back: int | None = None,
    rng: np.random.Generator | None = None,
    exact_negatives: bool = False,
):
    """Contrastive-divergence gradient for the energy slice.

    Positive phase: mean energy gradient over the data batch. Negative
    phase: the same over model samples, obtained by k_cd rounds of the
    back-and-forth kernel started at the data (or by exact enumeration
    when ``exact_negatives`` is set). Returns (full-length gradient,
    diagnostics).
    """
    data = 2.0 * np.asarray(data_bits, dtype=np.float64) - 1.0
    b = data.shape[0]
    bound = model.bound(store)
    if exact_negatives:
        exact = exact_model_distribution(store, model)
        neg_bits = exact.sample_terminals(b, rng=rng)
        neg = 2.0 * neg_bits - 1.0
        accept_rate = 1.0
    else:
        neg = data.copy()
        n_acc = 0
        for _ in range(k_cd):
            neg, acc, _ = mh_back_forth_step(
                store, fwd, bwd, bound.log_rewards_numeric, neg, k_back, rng=rng
            )
            n_acc += int(acc.sum())
        # k_cd = 0 keeps the negatives at the data (zero-gradient identity).
        accept_rate = n_acc / (b * k_cd) if k_cd else 0.0
    grad = np.zeros(len(store))
    start, stop = store.bounds(model.slice_name)
    grad[start:stop] = model.energy_param_grad(
        store, data, np.full(b, 1.0 / b)
    ) - model.energy_param_grad(store, neg, np.full(b, 1.0 / b))
    return grad, {"accept_rate": accept_rate, "negatives": (neg > 0).astype(np.int8)}


def exact_energy_gradient(
    store: ParameterStore, model: EnergyModel, data_bits: np.ndarray
) -> np.ndarray:
    """Exact NLL gradient for the energy slice via full enumeration."""
    data = 2.0 * np.asarray(data_bits, dtype=np.float64) - 1.0
    b = data.shape[0]
    exact = exact_model_distribution(store, model)
    spins = 2.0 * all_terminal_bits(model.dim) - 1.0
    grad = np.zeros(len(store))
    start, stop = store.bounds(model.slice_name)
    grad[start:stop] = model.energy_param_grad(
        store, data, np.full(b, 1.0 / b)
    ) - model.energy_param_grad(store, spins, exact.probabilities())
    return grad
