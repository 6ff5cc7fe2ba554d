import json
import os

import numpy as np
import pytest

from gfnvi.cli import CSV_COLUMNS, _fmt, main
from gfnvi.config import (
    ConfigError,
    build_settings,
    make_model,
    make_target,
    parse_overrides,
    settings_to_flat,
    settings_to_json,
)
from gfnvi.targets import build_density


def train_args(out_dir, **extra):
    pairs = {
        "target.name": "8gaussians",
        "target.bits_per_dim": "2",
        "policy.hidden": "8",
        "objective.batch_size": "8",
        "run.steps": "6",
        "run.eval_every": "3",
        "run.eval_samples": "32",
        "run.test_points": "16",
        "run.is_paths": "10",
        "run.out_dir": str(out_dir),
    }
    pairs.update({k: str(v) for k, v in extra.items()})
    return ["train"] + [f"{k}={v}" for k, v in pairs.items()]


def read_rows(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [dict(zip(header, line.rstrip("\n").split(","))) for line in fh]
    return header, rows


class TestOverrideParsing:
    def test_pairs_and_precedence(self):
        got = parse_overrides(["run.seed=1", "run.seed=2", "optim.lr=0.5"])
        assert got == {"run.seed": "2", "optim.lr": "0.5"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_overrides(["run.seed"])

    def test_key_needs_a_section(self):
        with pytest.raises(ConfigError):
            parse_overrides(["seed=3"])


class TestBuildSettings:
    def test_defaults(self):
        s = build_settings({})
        assert s.target.name == "8gaussians"
        assert s.policy.hidden == (256, 256)
        assert s.run.steps == 100

    def test_type_conversion(self):
        s = build_settings(
            {
                "policy.hidden": "32,16",
                "policy.child_logits": "true",
                "target.sigma": "0.5",
                "optim.lr_psi": "none",
                "run.seed": "7",
            }
        )
        assert s.policy.hidden == (32, 16)
        assert s.policy.child_logits is True
        assert s.target.sigma == 0.5
        assert s.optim.lr_psi is None
        assert s.run.seed == 7

    def test_empty_tuple(self):
        assert build_settings({"policy.hidden": ""}).policy.hidden == ()

    def test_rejections(self):
        bad = [
            {"nosuch.key": "1"},
            {"run.nosuch": "1"},
            {"run.seed": "x"},
            {"policy.child_logits": "maybe"},
            {"target.name": "3moons"},
            {"target.name": "density_file"},
            {"policy.backward": "sideways"},
            {"objective.cv": "mystery"},
            {"run.steps": "-1"},
            {"run.eval_every": "0"},
        ]
        for pairs in bad:
            with pytest.raises(ConfigError):
                build_settings(pairs)

    def test_json_echo_roundtrip(self):
        s = build_settings({"policy.hidden": "8,4", "objective.alpha": "0.25"})
        flat = json.loads(settings_to_json(s))
        pairs = {
            k: ",".join(str(x) for x in v) if isinstance(v, list) else str(v)
            for k, v in flat.items()
        }
        again = build_settings(pairs)
        assert settings_to_flat(again) == settings_to_flat(s)


class TestAssembly:
    def test_targets_by_name(self):
        s = build_settings({"target.bits_per_dim": "3"})
        assert make_target(s).dim == 6
        s = build_settings({"target.name": "ising", "target.ising_n": "3"})
        assert make_target(s).dim == 9

    def test_model_slices_per_backward_mode(self):
        base = {"policy.hidden": "8"}
        s = build_settings(base)
        assert set(make_model(s, 4).store.names) == {"phi", "psi"}
        s = build_settings({**base, "policy.backward": "learned"})
        assert set(make_model(s, 4).store.names) == {"phi", "theta", "psi"}
        s = build_settings({**base, "policy.backward": "shared"})
        assert set(make_model(s, 4).store.names) == {"eta", "psi"}
        s = build_settings({**base, "ebm.enabled": "true"})
        assert set(make_model(s, 4).store.names) == {"phi", "xi", "psi"}

    def test_flow_scalar_starts_at_zero(self):
        s = build_settings({"policy.hidden": "8"})
        assert make_model(s, 3).psi == 0.0


class TestFormatting:
    def test_fmt(self):
        assert _fmt(None) == ""
        assert _fmt(7) == "7"
        assert _fmt(0.1) == "0.1"
        assert _fmt(float("nan")) == "nan"


class TestTrainCommand:
    def test_smoke_run_outputs(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(train_args(out)) == 0
        echo = capsys.readouterr().out
        assert json.loads(echo)["run.steps"] == 6

        header, rows = read_rows(out / "metrics.csv")
        assert header == CSV_COLUMNS
        assert [r["step"] for r in rows] == [str(i) for i in range(6)]
        for row in rows:
            assert row["loss"] != ""
            assert row["psi"] != ""
            assert row["wall_ms"] == "0"
        filled = [r["step"] for r in rows if r["nll_test"] != ""]
        assert filled == ["2", "5"]
        assert all(r["elbo"] != "" for r in rows if r["step"] in filled)
        assert all(r["kl_exact"] != "" for r in rows if r["step"] in filled)

        assert json.load(open(out / "config.json"))["policy.hidden"] == [8]
        assert (out / "checkpoint.gfnck").exists()

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(train_args(a, **{"run.steps": 4})) == 0
        assert main(train_args(b, **{"run.steps": 4})) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "config.json").read_text() != ""

    def test_zero_steps_writes_header_only(self, tmp_path):
        out = tmp_path / "empty"
        assert main(train_args(out, **{"run.steps": 0})) == 0
        header, rows = read_rows(out / "metrics.csv")
        assert header == CSV_COLUMNS
        assert rows == []
        assert (out / "checkpoint.gfnck").exists()

    def test_periodic_checkpoints(self, tmp_path):
        out = tmp_path / "ck"
        assert main(train_args(out, **{"run.steps": 4, "run.checkpoint_every": 2})) == 0
        assert (out / "checkpoint_000002.gfnck").exists()
        assert (out / "checkpoint_000004.gfnck").exists()

    def test_bad_key_exits_one(self, tmp_path, capsys):
        assert main(["train", "nosuch.key=1"]) == 1
        assert "config error" in capsys.readouterr().err

    def test_numeric_abort_exits_three(self, tmp_path, capsys):
        out = tmp_path / "abort"
        code = main(train_args(out, **{"run.steps": 3, "optim.lr_psi": "1e7"}))
        assert code == 3
        assert "numeric abort" in capsys.readouterr().err
        _, rows = read_rows(out / "metrics.csv")
        assert rows[-1]["loss"] == "nan"
        assert rows[-1]["mean_logw"] == ""


class TestVerifyCommand:
    def test_clean_pass(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "checks passed" in out
        assert "FAIL" not in out

    def test_corrupted_gradient_detected(self, capsys):
        assert main(["verify", "--corrupt-psi-grad"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestSweepCommand:
    def test_grid_with_seed_aggregation(self, tmp_path, capsys):
        root = tmp_path / "sw"
        args = train_args(root, **{"run.steps": 2, "run.eval_every": 2})[1:]
        code = main(
            ["sweep", "sweep.objective.alpha=0,0.5", "sweep.run.seed=0,1"] + args
        )
        assert code == 0
        for name in ("combo000_seed0", "combo000_seed1", "combo001_seed0"):
            assert (root / name / "metrics.csv").exists()
        table = (root / "sweep.tsv").read_text().splitlines()
        assert table[0].split("\t")[0] == "objective.alpha"
        assert len(table) == 3
        assert "±" in table[1]  # two seeds aggregate to mean and spread
        assert capsys.readouterr().out.count("\n") >= 3

    def test_needs_an_axis(self, capsys):
        assert main(["sweep", "run.steps=1"]) == 1
        assert "config error" in capsys.readouterr().err


class TestExactCommand:
    def test_report_fields(self, capsys):
        code = main(
            ["exact", "target.bits_per_dim=2", "policy.hidden=8", "run.seed=3"]
        )
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["kl_qp"] >= 0
        assert doc["gap"] == pytest.approx(doc["log_z"] - doc["mean_log_weight"])
        assert doc["psi"] == 0.0

    def test_checkpoint_reload(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(train_args(out, **{"run.steps": 2})) == 0
        capsys.readouterr()  # drop the training echo
        args = [
            "exact",
            "target.bits_per_dim=2",
            "policy.hidden=8",
            "--checkpoint",
            str(out / "checkpoint.gfnck"),
        ]
        assert main(args) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["psi"] != 0.0  # trained value came from the checkpoint

    def test_checkpoint_shape_mismatch(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(train_args(out, **{"run.steps": 1})) == 0
        code = main(
            [
                "exact",
                "target.bits_per_dim=2",
                "policy.hidden=16",
                "--checkpoint",
                str(out / "checkpoint.gfnck"),
            ]
        )
        assert code == 1
        assert "config error" in capsys.readouterr().err


class TestDensityExport:
    def test_roundtrip_through_density_file_target(self, tmp_path, capsys):
        prefix = str(tmp_path / "spirals")
        code = main(
            [
                "export-density",
                "--out",
                prefix,
                "target.name=2spirals",
                "target.bits_per_dim=3",
            ]
        )
        assert code == 0
        assert os.path.exists(prefix + ".f64")
        s = build_settings(
            {"target.name": "density_file", "target.density_path": prefix}
        )
        loaded = make_target(s)
        direct = build_density("2spirals", 3)
        np.testing.assert_array_equal(loaded.cell_log_mass, direct.cell_log_mass)

    def test_ising_cannot_export(self, capsys):
        assert main(["export-density", "--out", "/tmp/x", "target.name=ising"]) == 1


class TestPlotCommand:
    def test_svg_written_and_reproducible(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(train_args(out, **{"run.steps": 4, "run.eval_every": 2})) == 0
        svg_a = tmp_path / "a.svg"
        svg_b = tmp_path / "b.svg"
        assert main(["plot", "--run", str(out), "--out", str(svg_a)]) == 0
        assert main(["plot", "--run", str(out), "--out", str(svg_b)]) == 0
        text = svg_a.read_text()
        assert text.startswith("<?xml")
        assert svg_a.read_bytes() == svg_b.read_bytes()

    def test_missing_run_dir(self, tmp_path, capsys):
        code = main(["plot", "--run", str(tmp_path / "nope"), "--out", "/tmp/y.svg"])
        assert code == 1
        assert "missing file" in capsys.readouterr().err
