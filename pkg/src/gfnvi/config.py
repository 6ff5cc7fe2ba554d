"""Flat ``section.field=value`` configuration and model assembly.

Every run option is addressable as one dotted key so command lines, sweep
axes and the JSON echo all share a single namespace. Types come from the
dataclass fields; unknown keys are rejected rather than ignored.
"""

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from . import seeds
from .nnet import MlpSpec, OptimConfig, Optimizer, ParameterStore, init_mlp
from .objectives import CV_KINDS, ObjectiveConfig
from .policy import BackwardPolicy, ForwardPolicy
from .targets import EnergyModel, IsingTarget, build_density, load_density

__all__ = ["ConfigError", "Settings", "parse_overrides", "build_settings",
           "settings_to_flat", "settings_to_json", "make_target", "make_model"]


class ConfigError(ValueError):
    """Bad key, bad value, or an inconsistent combination."""


@dataclass
class TargetSection:
    name: str = "8gaussians"  # 8gaussians | 2spirals | ising | density_file
    bits_per_dim: int = 4
    sigma: typing.Optional[float] = None
    extent: float = 4.0
    n_curve: int = 2048
    ising_n: int = 3
    beta: float = 0.2
    density_path: str = ""


@dataclass
class PolicySection:
    hidden: typing.Tuple[int, ...] = (256, 256)
    backward: str = "uniform"  # uniform | learned | shared
    child_logits: bool = False
    init_scale: float = 1.0
    activation: str = "tanh"


@dataclass
class ObjectiveSection:
    family: str = "alphakl"
    alpha: float = 0.0
    cv: str = "lrn"
    cv_fixed: float = 0.0
    batch_size: int = 64
    bernoulli_split: bool = False


@dataclass
class OptimSection:
    method: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_psi: typing.Optional[float] = None


@dataclass
class RunSection:
    seed: int = 0
    steps: int = 100
    eval_every: int = 20
    checkpoint_every: int = 0  # 0 means final checkpoint only
    out_dir: str = "runs/out"
    record_wall_time: bool = False
    eval_samples: int = 256
    test_points: int = 128
    is_paths: int = 100


@dataclass
class EbmSection:
    enabled: bool = False
    hidden: typing.Tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    k_cd: int = 1
    k_back: int = 0  # 0 means ceil(dim / 2)
    dataset_size: int = 1024
    dataset_seed: int = 0
    exact_negatives: bool = False


@dataclass
class Settings:
    target: TargetSection = field(default_factory=TargetSection)
    policy: PolicySection = field(default_factory=PolicySection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optim: OptimSection = field(default_factory=OptimSection)
    run: RunSection = field(default_factory=RunSection)
    ebm: EbmSection = field(default_factory=EbmSection)

    def objective_config(self) -> ObjectiveConfig:
        o = self.objective
        return ObjectiveConfig(
            o.family, o.alpha, o.cv, o.cv_fixed, o.batch_size, o.bernoulli_split
        )


def parse_overrides(args) -> dict:
    """Split ``key=value`` strings; later duplicates win."""
    pairs = {}
    for arg in args:
        if "=" not in arg:
            raise ConfigError(f"expected key=value, got {arg!r}")
        key, _, value = arg.partition("=")
        if not key or "." not in key:
            raise ConfigError(f"keys are section.field, got {key!r}")
        pairs[key] = value
    return pairs


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:  # Optional[...]
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return _convert(raw, inner, key)
    if tp is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: {raw!r} is not a boolean")
    try:
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if origin is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from None
    if tp is str:
        return raw
    raise ConfigError(f"{key}: unsupported field type {tp}")


def build_settings(pairs: dict) -> Settings:
    settings = Settings()
    for key, raw in pairs.items():
        section_name, _, field_name = key.partition(".")
        section = getattr(settings, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section {section_name!r}")
        match = {f.name: f for f in dataclasses.fields(section)}.get(field_name)
        if match is None:
            raise ConfigError(f"unknown key {key!r}")
        setattr(section, field_name, _convert(raw, match.type, key))
    _validate(settings)
    return settings


def _validate(s: Settings) -> None:
    if s.target.name not in ("8gaussians", "2spirals", "ising", "density_file"):
        raise ConfigError(f"unknown target {s.target.name!r}")
    if s.target.name == "density_file" and not s.target.density_path:
        raise ConfigError("density_file target needs target.density_path")
    if s.policy.backward not in ("uniform", "learned", "shared"):
        raise ConfigError(f"unknown backward mode {s.policy.backward!r}")
    if s.objective.cv not in CV_KINDS:
        raise ConfigError(f"unknown control variate {s.objective.cv!r}")
    try:
        s.objective_config()
        OptimConfig(s.optim.method, s.optim.lr, s.optim.beta1, s.optim.beta2, s.optim.eps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if s.run.steps < 0 or s.run.eval_every < 1:
        raise ConfigError("run.steps must be >= 0 and run.eval_every >= 1")


def settings_to_flat(settings: Settings) -> dict:
    flat = {}
    for section_field in dataclasses.fields(settings):
        section = getattr(settings, section_field.name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = list(value)
            flat[f"{section_field.name}.{f.name}"] = value
    return flat


def settings_to_json(settings: Settings) -> str:
    return json.dumps(settings_to_flat(settings), indent=2, sort_keys=True)


def make_target(settings: Settings):
    """Instantiate the configured target.

    With ebm.enabled this is the data distribution the dataset is sampled
    from; the sampler itself then trains against the learned energy.
    """
    t = settings.target
    if t.name in ("8gaussians", "2spirals"):
        return build_density(
            t.name, t.bits_per_dim, sigma=t.sigma, n_curve=t.n_curve, extent=t.extent
        )
    if t.name == "density_file":
        return load_density(t.density_path)
    return IsingTarget.torus(t.ising_n, t.beta)


@dataclass
class Model:
    """Everything parameterised: the store plus the policy/energy views."""

    store: ParameterStore
    fwd: ForwardPolicy
    bwd: BackwardPolicy
    energy: typing.Optional[EnergyModel]

    @property
    def psi(self) -> float:
        return self.store.scalar("psi")


def make_model(settings: Settings, dim: int) -> Model:
    p = settings.policy
    sizes = {}
    if p.backward == "shared":
        spec = MlpSpec(dim, p.hidden, 4 * dim, p.activation, p.init_scale)
        fwd = ForwardPolicy(dim, spec, "eta", 4, p.child_logits)
        bwd = BackwardPolicy(dim, "shared", spec, "eta")
        sizes["eta"] = spec.n_params
    else:
        spec = MlpSpec(dim, p.hidden, 2 * dim, p.activation, p.init_scale)
        fwd = ForwardPolicy(dim, spec, "phi", 2, p.child_logits)
        sizes["phi"] = spec.n_params
        if p.backward == "learned":
            bspec = MlpSpec(dim, p.hidden, dim, p.activation, p.init_scale)
            bwd = BackwardPolicy(dim, "learned", bspec, "theta")
            sizes["theta"] = bspec.n_params
        else:
            bwd = BackwardPolicy(dim, "uniform")
    energy = None
    if settings.ebm.enabled:
        energy = EnergyModel(dim, settings.ebm.hidden)
        sizes["xi"] = energy.spec.n_params
    sizes["psi"] = 1

    store = ParameterStore(sizes)
    rng = seeds.stream(settings.run.seed, "init")
    for name in store.names:
        if name == "psi":
            continue  # the log-partition slot starts at zero
        spec_for = {
            "phi": fwd.spec,
            "eta": fwd.spec,
            "theta": None if bwd.spec is None else bwd.spec,
            "xi": None if energy is None else energy.spec,
        }[name]
        store.view(name)[:] = init_mlp(spec_for, rng)
    return Model(store, fwd, bwd, energy)


def make_optimizer(settings: Settings, store: ParameterStore) -> Optimizer:
    o = settings.optim
    overrides = {}
    if o.lr_psi is not None and store.has("psi"):
        overrides["psi"] = o.lr_psi
    if settings.ebm.enabled and store.has("xi"):
        overrides["xi"] = settings.ebm.lr
    return Optimizer(
        store, OptimConfig(o.method, o.lr, o.beta1, o.beta2, o.eps), overrides
    )
