"""Trajectory-balance and KL objectives as per-sample surrogate coefficients.

Every estimator here reduces to coefficients (A_s, B_s, C_s) on the three
parameter-dependent quantities of a sampled trajectory: log Q (forward
policy), log PB (backward policy, when learned) and the log-partition slot.
The assembled gradient is

    g = sum_s w_s (A_s dlogQ_s + B_s dlogPB_s) + (sum_s w_s C_s) e_psi

with sample weights w_s (1/S for a plain batch), so one weighted backward
pass per policy net produces the whole estimator.

Everything is built from the normalisation-free log-weight
logw~ = log R + log PB - log Q. The true log importance weight is
logw~ - log Z; constant log Z shifts land in the scaling term of the
score-function estimators, where they do not bias the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nnet import NonFiniteGradientError, ParameterStore
from .policy import (
    BackwardPolicy,
    ForwardPolicy,
    TrajectoryBatch,
    WeightedTrajectory,
    sample_backward_batch,
    sample_forward_batch,
)

__all__ = [
    "CV_KINDS",
    "BatchTooSmallError",
    "ParamCapError",
    "WrongSampleDirectionError",
    "WrongParamModeError",
    "NonFiniteLossError",
    "ObjectiveConfig",
    "EstimatorOutput",
    "tb_loss",
    "tb_gradient_batch",
    "rkl_gradient_batch",
    "fkl_gradient_batch",
    "cv_scaling",
    "cv_optimal_scaling",
    "alpha_tb_step",
    "alpha_kl_step",
    "shared_param_gradient",
]

CV_KINDS = ("fixed", "lrn", "loo_logw", "loo_logz", "loo_opt")

# A per-sample coefficient this large means the run has diverged; abort the
# step instead of clipping so the failure is visible.
_COEFF_ABORT = 1e6

# Per-sample gradient vectors get materialised for loo_opt; cap the net size.
_LOO_OPT_PARAM_CAP = 10_000


class BatchTooSmallError(ValueError):
    """The chosen control variate needs more samples per batch."""


class ParamCapError(ValueError):
    """Per-sample gradient storage refused for an oversized net."""


class WrongSampleDirectionError(ValueError):
    """An estimator received samples drawn under the wrong distribution."""


class WrongParamModeError(ValueError):
    """The shared-parameter form needs policies that share one slice."""


class NonFiniteLossError(FloatingPointError):
    """A loss evaluated to NaN or infinity."""


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which objective family a training step optimises.

    alpha interpolates sampling directions: 0 trains on forward samples
    only, 1 on backward samples only. The batch is split deterministically
    (round(alpha * S) backward) unless ``bernoulli_split`` is set.
    """

    family: str = "alphakl"  # alphatb | alphakl
    alpha: float = 0.0
    cv: str = "lrn"
    cv_fixed: float = 0.0
    batch_size: int = 64
    bernoulli_split: bool = False

    def __post_init__(self) -> None:
        if self.family not in ("alphatb", "alphakl"):
            raise ValueError(f"unknown objective family {self.family!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.cv not in CV_KINDS:
            raise ValueError(f"unknown control variate {self.cv!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass(eq=False)
class EstimatorOutput:
    """Loss, per-sample surrogate coefficients, and the assembled gradient."""

    loss: float
    coeff_log_q: np.ndarray
    coeff_log_pb: np.ndarray
    coeff_psi: np.ndarray
    sample_weights: np.ndarray
    gradient: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _check_finite_batch(batch: TrajectoryBatch) -> np.ndarray:
    logw = batch.log_weight
    if not np.all(np.isfinite(logw)):
        raise NonFiniteLossError("non-finite log-weight in batch (zero reward?)")
    return logw


def _guard(coeffs: np.ndarray) -> None:
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max(initial=0.0) > _COEFF_ABORT:
        raise NonFiniteGradientError("per-sample coefficient out of range; aborting step")


def _diagnostics(logw: np.ndarray, c_used: float) -> dict:
    shifted = np.exp(logw - logw.max())
    ess = float(shifted.sum() ** 2 / (shifted * shifted).sum())
    return {
        "mean_logw": float(logw.mean()),
        "var_logw": float(logw.var()),
        "ess": ess,
        "c_used": float(c_used),
    }


def _assemble(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    batch: TrajectoryBatch,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    w: np.ndarray,
) -> np.ndarray:
    grad = np.zeros(len(store))
    if np.any(w * a):
        fwd.logq_grad_accumulate(store, batch, w * a, grad)
    if bwd.has_params and np.any(w * b):
        bwd.logpb_grad_accumulate(store, batch, w * b, grad)
    if store.has("psi"):
        grad[store.bounds("psi")[0]] += float(np.sum(w * c))
    return grad


def tb_loss(wt: WeightedTrajectory, psi: float) -> float:
    """Squared trajectory-balance residual of one weighted trajectory."""
    delta = psi - wt.log_weight
    if not np.isfinite(delta):
        raise NonFiniteLossError("trajectory-balance residual is not finite")
    return float(delta * delta)


def tb_gradient_batch(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    batch: TrajectoryBatch,
    *,
    psi: float | None = None,
    sample_weights: np.ndarray | None = None,
) -> EstimatorOutput:
    """Exact gradient of the mean squared balance residual over the batch.

    Per sample: delta_s = psi - logw~_s, A_s = 2 delta_s, B_s = -2 delta_s,
    C_s = 2 delta_s.
    """
    if psi is None:
        psi = store.scalar("psi")
    logw = _check_finite_batch(batch)
    delta = psi - logw
    _guard(delta)
    s = batch.size
    a = 2.0 * delta
    b = -2.0 * delta if bwd.has_params else np.zeros(s)
    c = 2.0 * delta
    w = np.full(s, 1.0 / s) if sample_weights is None else sample_weights
    grad = _assemble(store, fwd, bwd, batch, a, b, c, w)
    loss = float(np.sum(w * delta * delta))
    out = EstimatorOutput(loss, a, b, c, w, grad, _diagnostics(logw, psi))
    return out


def cv_scaling(log_weights: np.ndarray, kind: str) -> tuple[np.ndarray, dict]:
    """Leave-one-out scalings added to the negative log-weight payoff.

    ``loo_logw`` averages the other samples' log-weights; ``loo_logz`` is the
    log of the other samples' mean weight. Returns (per-sample scaling,
    info). For ``loo_logw`` the info carries the algebraically equivalent
    full-mean form: using the batch mean for every sample and rescaling the
    estimator by (S-1)/S.
    """
    logw = np.asarray(log_weights, dtype=np.float64)
    s = logw.size
    if s < 2:
        raise BatchTooSmallError("leave-one-out scalings need at least 2 samples")
    if kind == "loo_logw":
        chat = (logw.sum() - logw) / (s - 1)
        return chat, {"full_mean": float(logw.mean()), "rescale": (s - 1) / s}
    if kind == "loo_logz":
        # log mean of the other samples' weights, one masked logsumexp per row.
        mat = np.tile(logw, (s, 1))
        np.fill_diagonal(mat, -np.inf)
        top = mat.max(axis=1)
        chat = top + np.log(np.exp(mat - top[:, None]).sum(axis=1)) - np.log(s - 1)
        return chat, {}
    raise ValueError(f"cv_scaling got kind {kind!r}")


def cv_optimal_scaling(
    g: np.ndarray, h: np.ndarray, *, var_floor: float = 1e-18
) -> np.ndarray:
    """Per-dimension leave-one-out Cov(g_d, h_d)/Var(h_d) ratios.

    ``g`` and ``h`` are per-sample vectors, shape (S, P). Entry (s, d) is
    estimated from the other S-1 samples, so subtracting chat * h keeps the
    estimator unbiased. Dimensions whose variance estimate falls below
    ``var_floor`` get a zero scaling.
    """
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if g.shape != h.shape:
        raise ValueError("g and h must align sample-for-sample")
    s = g.shape[0]
    if s < 3:
        raise BatchTooSmallError("leave-one-out covariances need at least 3 samples")
    n = s - 1
    sum_g, sum_h = g.sum(axis=0), h.sum(axis=0)
    sum_gh, sum_hh = (g * h).sum(axis=0), (h * h).sum(axis=0)
    loo_g = sum_g - g
    loo_h = sum_h - h
    # Unbiased sample moments over each leave-one-out set of n points.
    cov = ((sum_gh - g * h) - loo_g * loo_h / n) / (n - 1)
    var = ((sum_hh - h * h) - loo_h * loo_h / n) / (n - 1)
    return np.where(var < var_floor, 0.0, np.divide(cov, np.where(var < var_floor, 1.0, var)))


def _baseline(logw, cv, cv_fixed, psi):
    if cv == "fixed":
        return np.full(logw.size, cv_fixed), cv_fixed
    if cv == "lrn":
        return np.full(logw.size, psi), psi
    chat, _ = cv_scaling(logw, cv)
    return chat, float(chat.mean())


def rkl_gradient_batch(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    batch: TrajectoryBatch,
    *,
    cv: str = "fixed",
    cv_fixed: float = 0.0,
    psi: float | None = None,
    sample_weights: np.ndarray | None = None,
) -> EstimatorOutput:
    """Score-function estimator of the forward KL objective KL(Q || P).

    Needs forward samples. Coefficients: A_s = -(logw~_s - b_s) with b_s the
    chosen scaling, B_s = -1 when the backward policy is learned. With
    cv="lrn" the scaling is the log-partition slot itself, which is in turn
    updated with the trajectory-balance rule (C_s = 2(psi - logw~_s)).

    The reported loss is the mean negative log-weight; it differs from the
    divergence by the constant log Z.
    """
    if batch.provenance != "forward":
        raise WrongSampleDirectionError("reverse-KL estimator needs forward samples")
    if psi is None:
        psi = store.scalar("psi") if store.has("psi") else 0.0
    logw = _check_finite_batch(batch)
    s = batch.size
    w = np.full(s, 1.0 / s) if sample_weights is None else sample_weights
    b_vec = -np.ones(s) if bwd.has_params else np.zeros(s)
    c_vec = 2.0 * (psi - logw) if cv == "lrn" else np.zeros(s)

    if cv == "loo_opt":
        n_params = fwd.spec.n_params
        if n_params > _LOO_OPT_PARAM_CAP:
            raise ParamCapError(
                f"loo_opt materialises per-sample gradients; net has {n_params} > "
                f"{_LOO_OPT_PARAM_CAP} parameters"
            )
        payoff = -logw
        _guard(payoff)
        h = fwd.logq_grad_per_sample(store, batch)
        g = payoff[:, None] * h
        chat = cv_optimal_scaling(g, h)
        grad = _assemble(store, fwd, bwd, batch, np.zeros(s), b_vec, c_vec, w)
        start, stop = store.bounds(fwd.slice_name)
        grad[start:stop] += (w[:, None] * (g - chat * h)).sum(axis=0)
        out = EstimatorOutput(
            float(np.sum(w * payoff)),
            payoff,
            b_vec,
            c_vec,
            w,
            grad,
            _diagnostics(logw, float(chat.mean())),
        )
        out.diagnostics["cv"] = cv
        return out

    baseline, c_used = _baseline(logw, cv, cv_fixed, psi)
    a = baseline - logw
    _guard(a)
    grad = _assemble(store, fwd, bwd, batch, a, b_vec, c_vec, w)
    out = EstimatorOutput(
        float(np.sum(w * -logw)), a, b_vec, c_vec, w, grad, _diagnostics(logw, c_used)
    )
    out.diagnostics["cv"] = cv
    return out


def fkl_gradient_batch(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    batch: TrajectoryBatch,
    *,
    cv: str = "fixed",
    cv_fixed: float = 0.0,
    psi: float | None = None,
    sample_weights: np.ndarray | None = None,
) -> EstimatorOutput:
    """Score-function estimator of the reverse direction KL(P || Q).

    Needs backward samples. A_s = -1 (cross-entropy on the forward policy);
    when the backward policy is learned its score term gets
    B_s = +(logw~_s - b_s). The reported loss is the mean log-weight.
    """
    if batch.provenance != "backward":
        raise WrongSampleDirectionError("forward-KL estimator needs backward samples")
    if psi is None:
        psi = store.scalar("psi") if store.has("psi") else 0.0
    logw = _check_finite_batch(batch)
    s = batch.size
    w = np.full(s, 1.0 / s) if sample_weights is None else sample_weights
    a = -np.ones(s)
    c_vec = 2.0 * (psi - logw) if cv == "lrn" else np.zeros(s)

    if bwd.has_params:
        if cv == "loo_opt":
            n_params = bwd.spec.n_params
            if n_params > _LOO_OPT_PARAM_CAP:
                raise ParamCapError(
                    f"loo_opt materialises per-sample gradients; net has {n_params} > "
                    f"{_LOO_OPT_PARAM_CAP} parameters"
                )
            payoff = logw
            _guard(payoff)
            h = bwd.logpb_grad_per_sample(store, batch)
            g = payoff[:, None] * h
            chat = cv_optimal_scaling(g, h)
            grad = _assemble(store, fwd, bwd, batch, a, np.zeros(s), c_vec, w)
            start, stop = store.bounds(bwd.slice_name)
            grad[start:stop] += (w[:, None] * (g - chat * h)).sum(axis=0)
            out = EstimatorOutput(
                float(np.sum(w * logw)),
                a,
                payoff,
                c_vec,
                w,
                grad,
                _diagnostics(logw, float(chat.mean())),
            )
            out.diagnostics["cv"] = cv
            return out
        baseline, c_used = _baseline(logw, cv, cv_fixed, psi)
        b_vec = logw - baseline
        _guard(b_vec)
    else:
        b_vec = np.zeros(s)
        c_used = 0.0 if cv not in ("fixed", "lrn") else (cv_fixed if cv == "fixed" else psi)
    grad = _assemble(store, fwd, bwd, batch, a, b_vec, c_vec, w)
    out = EstimatorOutput(
        float(np.sum(w * logw)), a, b_vec, c_vec, w, grad, _diagnostics(logw, c_used)
    )
    out.diagnostics["cv"] = cv
    return out


def _concat(batches: list[TrajectoryBatch], provenance: str) -> TrajectoryBatch:
    return TrajectoryBatch(
        batches[0].dim,
        np.concatenate([b.added_pos for b in batches]),
        np.concatenate([b.added_bit for b in batches]),
        np.concatenate([b.step_log_pf for b in batches]),
        np.concatenate([b.step_log_pb for b in batches]),
        np.concatenate([b.log_r for b in batches]),
        provenance,
    )


def _split_sizes(alpha: float, batch_size: int, bernoulli: bool, rng) -> tuple[int, int]:
    if bernoulli:
        if rng is None:
            raise ValueError("the Bernoulli split needs a random stream")
        n_back = int(rng.binomial(batch_size, alpha))
    else:
        n_back = int(round(alpha * batch_size))
    return batch_size - n_back, n_back


def alpha_tb_step(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    alpha: float,
    batch_size: int,
    *,
    rng: np.random.Generator | None = None,
    uniforms_forward: np.ndarray | None = None,
    uniforms_backward: np.ndarray | None = None,
    bernoulli: bool = False,
    terminals_backward: np.ndarray | None = None,
) -> EstimatorOutput:
    """One trajectory-balance step on an alpha-mixture of sample directions.

    round(alpha * S) trajectories come from the backward direction, the rest
    from the forward policy; the loss is alpha * (backward group mean) +
    (1 - alpha) * (forward group mean), and the gradient matches it exactly.
    ``terminals_backward`` (0/1 rows) replaces the target's own sampler for
    the backward group, e.g. when that group comes from a dataset.
    """
    n_fwd, n_back = _split_sizes(alpha, batch_size, bernoulli, rng)
    groups, weights = [], []
    if n_fwd:
        fb = sample_forward_batch(
            store,
            fwd,
            bwd,
            target,
            n_fwd,
            rng=rng,
            uniforms=None if uniforms_forward is None else uniforms_forward[:n_fwd],
        )
        groups.append(fb)
        weights.append(np.full(n_fwd, (1.0 - alpha) / n_fwd))
    if n_back:
        bb = sample_backward_batch(
            store,
            fwd,
            bwd,
            target,
            n_back,
            rng=rng,
            uniforms=None if uniforms_backward is None else uniforms_backward[:n_back],
            terminals=None if terminals_backward is None else terminals_backward[:n_back],
        )
        groups.append(bb)
        weights.append(np.full(n_back, alpha / n_back))
    batch = groups[0] if len(groups) == 1 else _concat(groups, "mixed")
    w = np.concatenate(weights)
    return tb_gradient_batch(store, fwd, bwd, batch, sample_weights=w)


def alpha_kl_step(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    target,
    alpha: float,
    batch_size: int,
    *,
    cv: str = "lrn",
    cv_fixed: float = 0.0,
    rng: np.random.Generator | None = None,
    uniforms_forward: np.ndarray | None = None,
    uniforms_backward: np.ndarray | None = None,
    bernoulli: bool = False,
    terminals_backward: np.ndarray | None = None,
) -> EstimatorOutput:
    """Convex combination of the two KL estimators on one mixed batch.

    The forward group feeds the KL(Q || P) estimator, the backward group the
    KL(P || Q) estimator; gradients combine with weights (1 - alpha, alpha).
    """
    n_fwd, n_back = _split_sizes(alpha, batch_size, bernoulli, rng)
    grad = np.zeros(len(store))
    loss = 0.0
    parts: list[EstimatorOutput] = []
    coeff_q, coeff_pb, coeff_psi, weights = [], [], [], []
    if n_fwd:
        fb = sample_forward_batch(
            store,
            fwd,
            bwd,
            target,
            n_fwd,
            rng=rng,
            uniforms=None if uniforms_forward is None else uniforms_forward[:n_fwd],
        )
        out = rkl_gradient_batch(store, fwd, bwd, fb, cv=cv, cv_fixed=cv_fixed)
        grad += (1.0 - alpha) * out.gradient
        loss += (1.0 - alpha) * out.loss
        parts.append(out)
        coeff_q.append(out.coeff_log_q)
        coeff_pb.append(out.coeff_log_pb)
        coeff_psi.append(out.coeff_psi)
        weights.append((1.0 - alpha) * out.sample_weights)
    if n_back:
        bb = sample_backward_batch(
            store,
            fwd,
            bwd,
            target,
            n_back,
            rng=rng,
            uniforms=None if uniforms_backward is None else uniforms_backward[:n_back],
            terminals=None if terminals_backward is None else terminals_backward[:n_back],
        )
        out = fkl_gradient_batch(store, fwd, bwd, bb, cv=cv, cv_fixed=cv_fixed)
        grad += alpha * out.gradient
        loss += alpha * out.loss
        parts.append(out)
        coeff_q.append(out.coeff_log_q)
        coeff_pb.append(out.coeff_log_pb)
        coeff_psi.append(out.coeff_psi)
        weights.append(alpha * out.sample_weights)
    diagnostics = dict(parts[0].diagnostics)
    if len(parts) == 2:
        diagnostics["mean_logw_backward"] = parts[1].diagnostics["mean_logw"]
    return EstimatorOutput(
        loss,
        np.concatenate(coeff_q),
        np.concatenate(coeff_pb),
        np.concatenate(coeff_psi),
        np.concatenate(weights),
        grad,
        diagnostics,
    )


def shared_param_gradient(
    store: ParameterStore,
    fwd: ForwardPolicy,
    bwd: BackwardPolicy,
    batch: TrajectoryBatch,
    family: str,
    *,
    cv: str = "fixed",
    cv_fixed: float = 0.0,
) -> EstimatorOutput:
    """Estimators for the single-net mode where both policies share one slice.

    The per-sample coefficients are unchanged; because both accumulation
    routes write into the shared slice, the combined chain rule through
    log Q and log PB lands on the same parameters.
    """
    if bwd.mode != "shared" or fwd.slice_name != bwd.slice_name or fwd.n_heads != 4:
        raise WrongParamModeError("shared-parameter form needs a four-head shared net")
    if family == "tb":
        return tb_gradient_batch(store, fwd, bwd, batch)
    if family == "rkl":
        return rkl_gradient_batch(store, fwd, bwd, batch, cv=cv, cv_fixed=cv_fixed)
    if family == "fkl":
        return fkl_gradient_batch(store, fwd, bwd, batch, cv=cv, cv_fixed=cv_fixed)
    raise ValueError(f"unknown family {family!r}")
