import csv
import hashlib
import json

import jsonschema
import numpy as np
import pytest

from ganadapt import cli, domain, metrics, nets
from ganadapt.latent import save_latent
from ganadapt.metrics import METRICS_REPORT_SCHEMA


@pytest.fixture(scope="module")
def assets(tmp_path_factory, source_bundle, w_ref, landmarker, hat_reference):
    """On-disk artifacts the CLI commands consume."""
    d = tmp_path_factory.mktemp("cli_assets")
    nets.save_checkpoint(d / "source.ckpt", source_bundle)
    save_latent(d / "w_ref.latent", w_ref)
    metrics.save_landmarker(d / "landmarker.ckpt", landmarker)
    domain.write_image_png(d / "ref.png", hat_reference.image)
    domain.write_mask_png(d / "mask.png", hat_reference.mask)
    return d


def _hash_tree(root, skip=("run_manifest.json",)):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_dataset_counts_and_determinism(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        rc = cli.main(["dataset", "--out-dir", str(out), "--count", "6", "--seed", "11"])
        assert rc == 0
    pngs = sorted(out1.glob("scene_*.png"))
    sidecars = sorted(out1.glob("scene_*.json"))
    assert len(pngs) == 6 and len(sidecars) == 6
    assert (out1 / "run_manifest.json").exists()
    assert _hash_tree(out1) == _hash_tree(out2)


def test_dataset_seed_changes_artifacts(tmp_path):
    cli.main(["dataset", "--out-dir", str(tmp_path / "a"), "--count", "2", "--seed", "1"])
    cli.main(["dataset", "--out-dir", str(tmp_path / "b"), "--count", "2", "--seed", "2"])
    assert _hash_tree(tmp_path / "a") != _hash_tree(tmp_path / "b")


def test_dataset_invalid_resolution_exit_code(tmp_path, capsys):
    rc = cli.main(["dataset", "--out-dir", str(tmp_path / "x"), "--resolution", "48"])
    assert rc == 1
    assert "resolution" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    assert cli.main(["adapt"]) == 1  # missing required args
    assert cli.main(["no-such-command"]) == 1


def test_pretrain_threshold_miss_still_writes(tmp_path):
    out = tmp_path / "pre"
    rc = cli.main(["pretrain", "--out-dir", str(out), "--max-steps", "1", "--seed", "3"])
    assert rc == 3  # threshold missed
    assert (out / "source.ckpt").exists()
    report = json.loads((out / "pretrain_report.json").read_text())
    assert report["converged"] is False


def test_adapt_command_artifacts(tmp_path, assets):
    out = tmp_path / "run"
    rc = cli.main(
        [
            "adapt",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--mask", str(assets / "mask.png"),
            "--latent", str(assets / "w_ref.latent"),
            "--epochs", "4",
            "--seed", "5",
            "--out-dir", str(out),
        ]
    )
    assert rc == 0
    assert (out / "w_ref.latent").exists()
    for epoch in (0, 2, 4):
        assert (out / f"adapted_epoch_{epoch:05d}.ckpt").exists()
    with open(out / "runlog.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "rec", "style", "ent", "reg", "total", "lr"]
    assert len(rows) == 5
    # before/after grid stacks a source row above an adapted row
    grid = domain.read_image_png(out / "grid_before_after.png")
    src = domain.read_image_png(out / "grid_source.png")
    assert grid.shape[0] == 2 * src.shape[0] and grid.shape[1] == src.shape[1]
    _, extra = nets.load_checkpoint(out / "adapted_epoch_00004.ckpt")
    assert extra["config"]["lam2"] == pytest.approx(0.2)  # entity defaults applied


def test_adapt_lambda_style_flag_zeroes_column(tmp_path, assets):
    out = tmp_path / "run0"
    rc = cli.main(
        [
            "adapt",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--mask", str(assets / "mask.png"),
            "--latent", str(assets / "w_ref.latent"),
            "--epochs", "3",
            "--lambda-style", "0",
            "--out-dir", str(out),
        ]
    )
    assert rc == 0
    _, extra = nets.load_checkpoint(out / "adapted_epoch_00003.ckpt")
    assert extra["config"]["lam2"] == 0.0


def test_adapt_without_mask_uses_maskfree_defaults(tmp_path, assets):
    out = tmp_path / "mask_free"
    rc = cli.main(
        [
            "adapt",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--latent", str(assets / "w_ref.latent"),
            "--epochs", "3",
            "--out-dir", str(out),
        ]
    )
    assert rc == 0
    _, extra = nets.load_checkpoint(out / "adapted_epoch_00003.ckpt")
    assert extra["config"]["lam2"] == 2.0
    assert extra["config"]["lam4"] == 0.5


def test_adapt_config_file_with_flag_override(tmp_path, assets):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"lam3": 3.5, "epochs": 100}))
    out = tmp_path / "cfgrun"
    rc = cli.main(
        [
            "adapt",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--mask", str(assets / "mask.png"),
            "--latent", str(assets / "w_ref.latent"),
            "--config", str(cfg_path),
            "--epochs", "2",  # flag wins over config file
            "--out-dir", str(out),
        ]
    )
    assert rc == 0
    _, extra = nets.load_checkpoint(out / "adapted_epoch_00002.ckpt")
    assert extra["config"]["lam3"] == 3.5
    assert extra["config"]["epochs"] == 2


def test_adapt_rejects_unknown_config_keys(tmp_path, assets, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"lambda_bogus": 1}))
    rc = cli.main(
        [
            "adapt",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--config", str(cfg_path),
            "--out-dir", str(tmp_path / "nope"),
        ]
    )
    assert rc == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_eval_identical_checkpoints(tmp_path, assets):
    out = tmp_path / "eval"
    args = [
        "eval",
        "--source-ckpt", str(assets / "source.ckpt"),
        "--adapted-ckpt", str(assets / "source.ckpt"),
        "--reference", str(assets / "ref.png"),
        "--mask", str(assets / "mask.png"),
        "--latent", str(assets / "w_ref.latent"),
        "--landmarker", str(assets / "landmarker.ckpt"),
        "--n", "8",
        "--out-dir", str(out),
    ]
    assert cli.main(args) == 0
    report = json.loads((out / "metrics_report.json").read_text())
    jsonschema.validate(report, METRICS_REPORT_SCHEMA)
    assert report["nme"] == 0.0
    assert report["embed_sim"] == pytest.approx(1.0, abs=1e-6)
    assert report["mask_iou"] is None  # identical-to-source checkpoint has no aux

    # seeded rerun reproduces the JSON byte-for-byte
    out2 = tmp_path / "eval2"
    assert cli.main(args[:-1] + [str(out2)]) == 0
    assert (out / "metrics_report.json").read_bytes() == (out2 / "metrics_report.json").read_bytes()


def test_eval_gate_exit_code(tmp_path, assets):
    out = tmp_path / "gated"
    rc = cli.main(
        [
            "eval",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--adapted-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--latent", str(assets / "w_ref.latent"),
            "--landmarker", str(assets / "landmarker.ckpt"),
            "--n", "4",
            "--min-embed-sim", "1.5",  # impossible gate
            "--out-dir", str(out),
        ]
    )
    assert rc == 3
    assert (out / "metrics_report.json").exists()


def test_compare_command(tmp_path, assets):
    out = tmp_path / "cmp"
    rc = cli.main(
        [
            "compare",
            "--source-ckpt", str(assets / "source.ckpt"),
            "--reference", str(assets / "ref.png"),
            "--mask", str(assets / "mask.png"),
            "--latent", str(assets / "w_ref.latent"),
            "--landmarker", str(assets / "landmarker.ckpt"),
            "--epochs", "4",
            "--seed", "9",
            "--n", "4",
            "--out-dir", str(out),
        ]
    )
    assert rc == 0
    with open(out / "compare.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["regularizer", "seed", "nme", "embed_sim", "style_dist", "mask_iou"]
    assert len(rows) == 3
    assert [r[0] for r in rows[1:]] == ["vlapr", "cdc"]
    assert rows[1][1] == rows[2][1] == "9"  # shared seed recorded
    for reg in ("vlapr", "cdc"):
        assert (out / reg / "adapted_epoch_00004.ckpt").exists()  # both retained
