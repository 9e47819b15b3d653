import json

import pytest
import yaml

from portionnet import cli
from portionnet.checkpoint import load_checkpoint

TINY = {
    "data": {"class_count": 4, "samples_per_class": 5, "n_points": 128, "resolution": 32},
    "model": {
        "class_count": 4, "n_points": 128, "backbone_dims": [24, 16], "feature_dim": 16, "proj_hidden": 32,
        "pointnet_widths": [8, 16], "pool_resolutions": [16, 32, 64], "bbox_embed_dim": 8, "adapter_hidden": 32,
        "attention_heads": 4, "fusion_hidden": 32, "cls_hidden": [32, 16], "energy_hidden": 16,
    },
    "training": {"epochs": 1, "micro_batch": 4, "accumulation_steps": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.yaml"
    config.write_text(yaml.safe_dump(TINY))
    assert cli.main(["generate", "--config", str(config), "--out", str(root / "data")]) == 0
    return root, config


@pytest.fixture(scope="module")
def trained(workspace):
    root, config = workspace
    out = root / "run"
    assert cli.main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(out), "--seed", "4"]) == 0
    return out


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_generate_writes_dataset_and_manifest(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / cli.MANIFEST).read_text())
    assert manifest["command"] == "generate" and manifest["n_samples"] == 20
    assert all(len(a["sha256"]) == 64 for a in manifest["artifacts"])


def test_generate_refuses_non_empty_out(workspace, capsys):
    root, config = workspace
    assert cli.main(["generate", "--config", str(config), "--out", str(root / "data")]) == cli.EXIT_CONFIG
    assert "not empty" in capsys.readouterr().err


def test_set_override_and_config_echo(tmp_path, workspace, capsys):
    _, config = workspace
    code = cli.main(["generate", "--config", str(config), "--out", str(tmp_path / "d"), "--set", "data.samples_per_class=2"])
    assert code == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["n_samples"] == 8
    assert "precedence: flags > file" in captured.err
    assert "data.samples_per_class: flag" in captured.err


def test_train_artifacts(trained):
    for name in ("config.yaml", "final_metrics.json", cli.MANIFEST):
        assert (trained / name).is_file()
    doc = json.loads((trained / "final_metrics.json").read_text())
    assert doc["seed"] == 4 and set(doc["final"]) == {"rgb", "rgbpc"}
    ckpts = list(trained.glob("*.pnck"))
    assert len(ckpts) == 1 and load_checkpoint(ckpts[0]).metadata["seed"] == 4


def test_evaluate_both_modes(workspace, trained, capsys):
    root, _ = workspace
    ckpt = next(trained.glob("*.pnck"))
    assert cli.main(["evaluate", "--checkpoint", str(ckpt), "--data", str(root / "data"), "--mode", "both"]) == 0
    out = _stdout_json(capsys)
    stored = json.loads((trained / "final_metrics.json").read_text())["final"]
    assert out["rgb"]["volume_mape"] == pytest.approx(stored["rgb"]["volume_mape"], rel=1e-12)
    assert out["rgbpc"]["mode"] == "rgbpc"


def test_corrupt_checkpoint_exit_code(workspace, trained, tmp_path):
    root, _ = workspace
    bad = tmp_path / "bad.pnck"
    raw = bytearray(next(trained.glob("*.pnck")).read_bytes())
    raw[-3] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert cli.main(["evaluate", "--checkpoint", str(bad), "--data", str(root / "data")]) == cli.EXIT_INTEGRITY


def test_config_errors_exit_one(workspace, tmp_path):
    root, config = workspace
    data = str(root / "data")
    assert cli.main(["train", "--config", str(config), "--data", data, "--out", str(tmp_path / "a"), "--alpha", "2"]) == 1
    assert cli.main(["train", "--config", str(config), "--data", data, "--out", str(tmp_path / "b"),
                     "--set", "training.bogus=1"]) == 1
    assert cli.main(["evaluate", "--checkpoint", "x{seed}.pnck", "--data", data]) == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--data", data])
    assert info.value.code == 1


def test_missing_dataset_exit_code(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_env_seed_is_lowest_precedence(workspace, monkeypatch, tmp_path):
    _, config = workspace
    monkeypatch.setenv(cli.SEED_ENV, "17")
    cfg, sources = cli.resolve_config(config, {}, "training.seed")
    assert cfg.training.seed == 17 and sources["training.seed"].startswith("env")
    cfg, sources = cli.resolve_config(config, {"training.seed": 3}, "training.seed")
    assert cfg.training.seed == 3 and sources["training.seed"] == "flag"
    with_seed = tmp_path / "seeded.yaml"
    with_seed.write_text(yaml.safe_dump({**TINY, "training": {**TINY["training"], "seed": 9}}))
    cfg, _ = cli.resolve_config(with_seed, {}, "training.seed")
    assert cfg.training.seed == 9
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    with pytest.raises(cli.ConfigError):
        cli.env_seed()


def test_multi_seed_train_and_template_evaluate(workspace, tmp_path, capsys):
    root, config = workspace
    out = tmp_path / "multi"
    assert cli.main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(out), "--seeds", "1,2"]) == 0
    agg = _stdout_json(capsys)
    assert agg["rgb"]["seeds"] == [1, 2] and (out / "aggregate.json").is_file()
    name = next((out / "seed-1").glob("*.pnck")).name
    template = str(out / "seed-{seed}" / name)
    assert cli.main(["evaluate", "--checkpoint", template, "--data", str(root / "data"), "--seeds", "1,2"]) == 0
    res = _stdout_json(capsys)
    assert set(res["rgb"]["per_seed"]) == {"1", "2"}
    assert res["rgb"]["aggregate"]["volume_mae"]["mean"] == pytest.approx(agg["rgb"]["volume_mae"]["mean"], rel=1e-9)


def test_sweep_points_deduplicate_default():
    full = cli.sweep_points("full")
    assert len(full) == 5
    assert [(a, lam) for _, a, lam in full].count((0.3, 0.5)) == 1
    assert [p[1] for p in cli.sweep_points("alpha")] == [0.0, 0.3, 0.5]
    assert [p[2] for p in cli.sweep_points("lambda")] == [0.0, 0.5, 1.0]


def test_sweep_rejects_colliding_and_overlapping_dirs(tmp_path):
    with pytest.raises(cli.ConfigError, match="same output"):
        cli.check_out_dirs(tmp_path / "o", ["a", "a"], tmp_path / "data")
    with pytest.raises(cli.ConfigError, match="overlaps"):
        cli.check_out_dirs(tmp_path / "data" / "sweep", ["a"], tmp_path / "data")


def test_mark_best_uses_rgb_volume_mae():
    rows = [{"rgb": {"volume_mae": {"mean": m}}} for m in (3.0, 1.0, 2.0)]
    cli.mark_best(rows)
    assert [r["best"] for r in rows] == [False, True, False]


@pytest.mark.slow
def test_sweep_end_to_end(workspace, tmp_path, capsys):
    root, config = workspace
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(config), "--data", str(root / "data"), "--out", str(out), "--grid", "alpha"]) == 0
    rows = _stdout_json(capsys)["rows"]
    assert [r["alpha"] for r in rows] == [0.0, 0.3, 0.5]
    assert sum(r["best"] for r in rows) == 1
    table = (out / "table.md").read_text()
    assert table.count("\n") == 5 and "*" in table
    for _, a, lam in cli.sweep_points("alpha"):
        assert (out / cli.point_dir(a, lam) / "seed-0" / "final_metrics.json").is_file()


def test_losscheck_exit_codes(capsys):
    assert cli.main(["losscheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert cli.main(["losscheck", "--perturb", "VOLUME_WEIGHT=0.5"]) == cli.EXIT_RUNTIME
    out = capsys.readouterr().out
    assert "FAIL" in out and "regression" in out
