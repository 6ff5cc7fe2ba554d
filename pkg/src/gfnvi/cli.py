"""Command line entry points.

Exit codes: 0 success, 1 configuration problem, 2 verification failure,
3 numeric abort during training. Training emits one CSV row per step;
evaluation columns fill on the eval cadence and stay empty otherwise.
Wall-clock times are recorded only when run.record_wall_time=true so two
runs with the same config and seed produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import seeds
from .config import (
    ConfigError,
    Settings,
    build_settings,
    make_model,
    make_optimizer,
    make_target,
    parse_overrides,
    settings_to_json,
)
from .evaluate import (
    STATE_DP_CAP,
    EnumerationOracle,
    expected_log_weight,
    is_marginal_log_likelihood,
)
from .nnet import NonFiniteGradientError, load_checkpoint, save_checkpoint
from .objectives import (
    BatchTooSmallError,
    NonFiniteLossError,
    ParamCapError,
    alpha_kl_step,
    alpha_tb_step,
)
from .targets import (
    NoTerminalSamplerError,
    build_density,
    cd_gradient_step,
    grid_index_table,
    sample_dataset,
)
from .verify import run_checks

CSV_COLUMNS = [
    "step",
    "loss",
    "mean_logw",
    "var_logw",
    "ess",
    "c_used",
    "psi",
    "nll_test",
    "elbo",
    "kl_exact",
    "wall_ms",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.12g}"


def _write_row(fh, values: dict) -> None:
    fh.write(",".join(_fmt(values.get(c)) for c in CSV_COLUMNS) + "\n")


class _Trainer:
    """Owns the assembled model and the per-step RNG discipline.

    Randomness is drawn as whole blocks keyed by (seed, purpose, step), so
    the numbers a step consumes never depend on batch composition or on
    how many other steps ran.
    """

    def __init__(self, settings: Settings):
        self.settings = settings
        self.data_target = make_target(settings)
        self.dim = self.data_target.dim
        self.model = make_model(settings, self.dim)
        self.optimizer = make_optimizer(settings, self.model.store)
        self.obj = settings.objective
        self.seed = settings.run.seed

        if settings.ebm.enabled:
            self.dataset = sample_dataset(
                self.data_target, settings.ebm.dataset_size, settings.ebm.dataset_seed
            )
            self.reward_target = self.model.energy.bound(self.model.store)
        else:
            self.dataset = None
            self.reward_target = self.data_target

        self._oracle = None
        self._test_points = None
        self._no_test_points = False

    def oracle(self):
        if self._oracle is None and self.dim <= STATE_DP_CAP:
            self._oracle = EnumerationOracle(self.dim)
        return self._oracle

    def test_points(self):
        if self._test_points is None and not self._no_test_points:
            n = self.settings.run.test_points
            if self.settings.ebm.enabled:
                self._test_points = sample_dataset(
                    self.data_target, n, self.settings.ebm.dataset_seed + 1
                )
            else:
                try:
                    self._test_points = self.data_target.sample_terminals(
                        n, rng=seeds.stream(self.seed, "eval", 0, 1)
                    )
                except NoTerminalSamplerError:
                    self._no_test_points = True
        return self._test_points

    def step(self, step: int) -> dict:
        s = self.settings
        m = self.model
        size = self.obj.batch_size
        uf = seeds.uniform_block(self.seed, "forward", step, (size, self.dim, 2))
        ub = seeds.uniform_block(self.seed, "backward", step, (size, self.dim + 1))
        rng = seeds.stream(self.seed, "forward", step, 1)

        terminals = None
        if self.dataset is not None:
            pick = seeds.uniform_block(self.seed, "cd", step, (size,))
            idx = np.minimum((pick * len(self.dataset)).astype(int), len(self.dataset) - 1)
            terminals = self.dataset[idx]

        kwargs = dict(
            rng=rng,
            uniforms_forward=uf,
            uniforms_backward=ub,
            bernoulli=self.obj.bernoulli_split,
            terminals_backward=terminals,
        )
        if self.obj.family == "alphatb":
            out = alpha_tb_step(
                m.store, m.fwd, m.bwd, self.reward_target, self.obj.alpha, size, **kwargs
            )
        else:
            out = alpha_kl_step(
                m.store,
                m.fwd,
                m.bwd,
                self.reward_target,
                self.obj.alpha,
                size,
                cv=self.obj.cv,
                cv_fixed=self.obj.cv_fixed,
                **kwargs,
            )
        grad = out.gradient
        if s.ebm.enabled:
            cd_grad, _ = cd_gradient_step(
                m.store,
                m.energy,
                m.fwd,
                m.bwd,
                terminals,
                k_cd=s.ebm.k_cd,
                k_back=s.ebm.k_back or None,
                rng=seeds.stream(self.seed, "mh", step),
                exact_negatives=s.ebm.exact_negatives,
            )
            grad = grad + cd_grad
        self.optimizer.step(grad)
        d = out.diagnostics
        return {
            "step": step,
            "loss": out.loss,
            "mean_logw": d["mean_logw"],
            "var_logw": d["var_logw"],
            "ess": d["ess"],
            "c_used": d["c_used"],
            "psi": m.store.scalar("psi"),
        }

    def evaluate(self, step: int) -> dict:
        s = self.settings
        m = self.model
        row = {}
        points = self.test_points()
        if points is not None:
            ll = is_marginal_log_likelihood(
                m.store,
                m.fwd,
                m.bwd,
                points,
                s.run.is_paths,
                rng=seeds.stream(self.seed, "eval", step),
            )
            row["nll_test"] = -float(ll.mean())
        mean, _ = expected_log_weight(
            m.store,
            m.fwd,
            m.bwd,
            self.reward_target,
            s.run.eval_samples,
            rng=seeds.stream(self.seed, "eval", step, 2),
        )
        row["elbo"] = mean
        if self.oracle() is not None:
            row["kl_exact"] = self.oracle().divergences(
                m.store, m.fwd, m.bwd, self.reward_target
            ).kl_qp
        return row


def cmd_train(args) -> int:
    settings = build_settings(parse_overrides(args.overrides))
    if not getattr(args, "quiet", False):
        print(settings_to_json(settings))
    out_dir = settings.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(settings_to_json(settings) + "\n")

    trainer = _Trainer(settings)
    steps = settings.run.steps
    every = settings.run.eval_every
    ck_every = settings.run.checkpoint_every
    code = 0
    with open(os.path.join(out_dir, "metrics.csv"), "w", buffering=1) as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for step in range(steps):
            t0 = time.perf_counter() if settings.run.record_wall_time else None
            try:
                row = trainer.step(step)
            except (NonFiniteGradientError, NonFiniteLossError) as exc:
                _write_row(fh, {"step": step, "loss": float("nan")})
                print(f"numeric abort at step {step}: {exc}", file=sys.stderr)
                code = 3
                break
            if (step + 1) % every == 0 or step == steps - 1:
                row.update(trainer.evaluate(step))
            row["wall_ms"] = (
                (time.perf_counter() - t0) * 1000.0 if t0 is not None else 0.0
            )
            _write_row(fh, row)
            if ck_every and (step + 1) % ck_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{step + 1:06d}.gfnck"),
                    trainer.model.store,
                    {"step": step + 1, "seed": settings.run.seed},
                )
    save_checkpoint(
        os.path.join(out_dir, "checkpoint.gfnck"),
        trainer.model.store,
        {"step": steps, "seed": settings.run.seed},
    )
    return code


def cmd_verify(args) -> int:
    results = run_checks(args.seed, corrupt_psi_grad=args.corrupt_psi_grad)
    for r in results:
        mark = "ok  " if r.ok else "FAIL"
        print(f"{mark} {r.name}: {r.detail}")
    bad = sum(not r.ok for r in results)
    print(f"{len(results) - bad}/{len(results)} checks passed")
    return 0 if bad == 0 else 2


def _sweep_axes(pairs: dict) -> tuple[dict, list]:
    base, axes = {}, []
    for key, value in pairs.items():
        if key.startswith("sweep."):
            axes.append((key[len("sweep.") :], value.split(",")))
        else:
            base[key] = value
    axes.sort()
    return base, axes


def _final_metrics(out_dir: str) -> dict:
    last = None
    with open(os.path.join(out_dir, "metrics.csv")) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            cells = line.strip().split(",")
            if len(cells) == len(header):
                last = dict(zip(header, cells))
    out = {}
    for key in ("loss", "elbo", "kl_exact", "nll_test"):
        if last and last.get(key):
            out[key] = float(last[key])
    return out


def cmd_sweep(args) -> int:
    base, axes = _sweep_axes(parse_overrides(args.overrides))
    if not axes:
        raise ConfigError("sweep needs at least one sweep.<key>=v1,v2 axis")
    seed_axis = [("run.seed", v) for k, v in axes if k == "run.seed"]
    grid_axes = [(k, v) for k, v in axes if k != "run.seed"]
    seed_values = seed_axis[0][1] if seed_axis else [base.get("run.seed", "0")]
    combos = list(itertools.product(*(v for _, v in grid_axes))) or [()]
    root = base.get("run.out_dir", "runs/sweep")

    jobs = []
    for ci, combo in enumerate(combos):
        for seed in seed_values:
            pairs = dict(base)
            pairs.update({k: v for (k, _), v in zip(grid_axes, combo)})
            pairs["run.seed"] = seed
            pairs["run.out_dir"] = os.path.join(root, f"combo{ci:03d}_seed{seed}")
            jobs.append((ci, combo, seed, pairs))

    def run_one(job):
        ci, combo, seed, pairs = job
        ns = argparse.Namespace(
            overrides=[f"{k}={v}" for k, v in pairs.items()], quiet=True
        )
        code = cmd_train(ns)
        return ci, combo, seed, code, _final_metrics(pairs["run.out_dir"])

    workers = max(1, int(os.environ.get("GFNVI_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, jobs))
    else:
        results = [run_one(j) for j in jobs]

    by_combo: dict[int, list] = {}
    for ci, combo, seed, code, metrics in results:
        by_combo.setdefault(ci, []).append((seed, code, metrics))

    metric_names = ("loss", "elbo", "kl_exact", "nll_test")
    axis_names = [k for k, _ in grid_axes]
    header = axis_names + [f"{m}" for m in metric_names]
    print("\t".join(header))
    lines = []
    for ci, combo in enumerate(combos):
        cells = list(combo)
        for m in metric_names:
            vals = [r[2][m] for r in by_combo[ci] if m in r[2]]
            if not vals:
                cells.append("")
            elif len(vals) == 1:
                cells.append(f"{vals[0]:.6g}")
            else:
                arr = np.array(vals)
                cells.append(f"{arr.mean():.6g}±{arr.std(ddof=1):.2g}")
        line = "\t".join(str(c) for c in cells)
        print(line)
        lines.append(line)
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "sweep.tsv"), "w") as fh:
        fh.write("\t".join(header) + "\n")
        for line in lines:
            fh.write(line + "\n")
    return 0 if all(code == 0 for _, _, _, code, _ in results) else 3


def _load_run(run_dir: str):
    with open(os.path.join(run_dir, "config.json")) as fh:
        flat = json.load(fh)
    pairs = {
        k: ",".join(str(x) for x in v) if isinstance(v, list) else str(v)
        for k, v in flat.items()
    }
    return build_settings(pairs)


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "gfnvi"
    import matplotlib.pyplot as plt

    run_dir = args.run
    steps, loss, elbo_steps, elbo, kl = [], [], [], [], []
    with open(os.path.join(run_dir, "metrics.csv")) as fh:
        header = fh.readline().strip().split(",")
        col = {name: i for i, name in enumerate(header)}
        for line in fh:
            cells = line.rstrip("\n").split(",")
            if not cells[col["loss"]]:
                continue
            steps.append(int(cells[col["step"]]))
            loss.append(float(cells[col["loss"]]))
            if cells[col["elbo"]]:
                elbo_steps.append(int(cells[col["step"]]))
                elbo.append(float(cells[col["elbo"]]))
                kl.append(float(cells[col["kl_exact"]]) if cells[col["kl_exact"]] else np.nan)

    settings = _load_run(run_dir)
    planar = settings.target.name in ("8gaussians", "2spirals", "density_file")
    want_grid = planar and os.path.exists(os.path.join(run_dir, "checkpoint.gfnck"))
    n_panels = 3 if want_grid else 2
    fig, axes = plt.subplots(1, n_panels, figsize=(4 * n_panels, 3.2))

    axes[0].plot(steps, loss, lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[1].plot(elbo_steps, elbo, lw=1.0, label="mean log weight")
    if not all(np.isnan(v) for v in kl):
        axes[1].plot(elbo_steps, kl, lw=1.0, label="exact KL")
    axes[1].set_xlabel("step")
    axes[1].legend(frameon=False, fontsize=8)

    if want_grid:
        target = make_target(settings)
        store, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.gfnck"))
        model = make_model(settings, target.dim)
        model.store.values[:] = store.values
        table = grid_index_table(settings.target.bits_per_dim)
        if target.dim <= STATE_DP_CAP:
            lq = EnumerationOracle(target.dim).terminal_log_q(model.store, model.fwd)
            q_grid = np.exp(lq)[table]
        else:
            rng = seeds.stream(settings.run.seed, "eval", 0, 3)
            from .policy import sample_forward_batch

            batch = sample_forward_batch(
                model.store, model.fwd, model.bwd, target, 20000, rng=rng
            )
            counts = np.bincount(
                batch.terminal_bits() @ (1 << np.arange(target.dim)), minlength=1 << target.dim
            )
            q_grid = (counts / counts.sum())[table]
        pi_grid = target.probabilities()[table]
        both = np.concatenate([pi_grid, q_grid], axis=1)
        axes[2].imshow(both.T, origin="lower", cmap="viridis")
        axes[2].set_title("target | sampler", fontsize=9)
        axes[2].set_xticks([])
        axes[2].set_yticks([])

    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def cmd_export_density(args) -> int:
    settings = build_settings(parse_overrides(args.overrides))
    if settings.target.name not in ("8gaussians", "2spirals"):
        raise ConfigError("export-density needs a named planar target")
    density = make_target(settings)
    from .targets import export_density

    export_density(density, args.out)
    print(f"wrote {args.out}.f64 and {args.out}.json")
    return 0


def cmd_exact(args) -> int:
    settings = build_settings(parse_overrides(args.overrides))
    target = make_target(settings)
    if target.dim > STATE_DP_CAP:
        raise ConfigError(f"exact evaluation needs dim <= {STATE_DP_CAP}")
    model = make_model(settings, target.dim)
    if args.checkpoint:
        store, _ = load_checkpoint(args.checkpoint)
        if len(store) != len(model.store):
            raise ConfigError(
                f"checkpoint holds {len(store)} parameters, model needs {len(model.store)}"
            )
        model.store.values[:] = store.values
    report = EnumerationOracle(target.dim).divergences(
        model.store, model.fwd, model.bwd, target
    )
    doc = {
        "log_z": report.log_z,
        "kl_qp": report.kl_qp,
        "kl_pq": report.kl_pq,
        "tv": report.tv,
        "mean_log_weight": report.mean_log_weight,
        "gap": report.gap,
        "psi": model.store.scalar("psi"),
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gfnvi",
        description="Variational sequential samplers for discrete targets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training loop, emit metrics and checkpoints")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--corrupt-psi-grad",
        action="store_true",
        help="deliberately corrupt one gradient component; verify must then fail",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="cross-product of sweep.* axes, seeds aggregated")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render curves (and grids for planar targets) as SVG")
    p.add_argument("--run", required=True, help="run directory with metrics.csv")
    p.add_argument("--out", required=True, help="output .svg path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("export-density", help="write a discretised target as .f64 + .json")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_export_density)

    p = sub.add_parser("exact", help="exact divergences for small problems")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_exact)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BatchTooSmallError, ParamCapError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
