import hashlib
import json

import pytest

from roigan import cli
from roigan.training import TrainingDivergedError


TINY = {
    "data": {"n_anatomies": 8, "noise_sigma": 0.02},
    "network": {"base_channels": 4, "depth": 2, "middle_blocks": 1,
                "critic_base_channels": 8, "critic_n_strided": 3},
    "train": {"epochs": 1, "batch_size": 2},
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    doc = json.loads(json.dumps(TINY))
    if extra:
        doc.update(extra)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One tiny dataset + one trained checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = write_config(root)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(root / "ds"), "--seed", "1"]) == 0
    assert cli.main([
        "train", "--config", cfg, "--out", str(root / "run"), "--seed", "1",
        "--data", str(root / "ds" / "manifest.json"),
    ]) == 0
    return root, cfg


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_writes_manifest_and_is_reproducible(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert (tmp_path / "a" / "manifest.json").exists()
    assert (tmp_path / "a" / "resolved_config.json").exists()
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert h(tmp_path / "a" / "manifest.json") == h(tmp_path / "b" / "manifest.json")


def test_malformed_config_names_offending_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"resolutionn": 64}}))
    code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "data.resolutionn" in capsys.readouterr().err


def test_invalid_json_config_is_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert cli.main(["gen-data", "--config", str(bad)]) == 2
    assert "JSON" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_artifacts(cli_workspace):
    root, _ = cli_workspace
    run = root / "run"
    assert (run / "ckpt_epoch_0001.npz").exists()
    assert (run / "ckpt_final.npz").exists()
    header = (run / "loss.csv").read_text().splitlines()[0]
    assert header == "step,adv_x,adv_r,gp_x,gp_r,cls_r_x,cls_r_r,cls_f_x,cls_f_r,shape_x,shape_r,rec_x,rec_r,cross,total_Dx,total_Dr,total_G,total_GS"
    assert (run / "resolved_config.json").exists()


def test_train_resume_extends_steps(cli_workspace, tmp_path):
    root, cfg_path = cli_workspace
    cfg2 = json.loads((root / "run" / "resolved_config.json").read_text())
    doc = json.loads(json.dumps(TINY))
    doc["train"]["epochs"] = 2
    cfg2_path = tmp_path / "cfg2.json"
    cfg2_path.write_text(json.dumps(doc))
    code = cli.main([
        "train", "--config", str(cfg2_path), "--out", str(tmp_path / "resumed"), "--seed", "1",
        "--data", str(root / "ds" / "manifest.json"),
        "--resume", str(root / "run" / "ckpt_final.npz"),
    ])
    assert code == 0
    rows = (tmp_path / "resumed" / "loss.csv").read_text().strip().splitlines()[1:]
    first_rows = (root / "run" / "loss.csv").read_text().strip().splitlines()[1:]
    first_steps = [int(r.split(",")[0]) for r in first_rows]
    resumed_steps = [int(r.split(",")[0]) for r in rows]
    assert resumed_steps[0] == first_steps[-1] + 1  # monotone continuation


def test_train_rejects_invalid_variant(tmp_path, cli_workspace):
    root, _ = cli_workspace
    cfg = write_config(tmp_path, extra={
        "variant": {"use_shape_controller": True, "use_target_stream": False, "use_crossing": True}
    })
    code = cli.main([
        "train", "--config", cfg, "--out", str(tmp_path / "x"),
        "--data", str(root / "ds" / "manifest.json"),
    ])
    assert code == 2


def test_runtime_abort_maps_to_exit_3(tmp_path, cli_workspace, monkeypatch):
    root, cfg = cli_workspace

    def explode(self, dataset, out_dir, log_every=0):
        raise TrainingDivergedError(7, "loss component adv_x is non-finite")

    monkeypatch.setattr(cli.Trainer, "train", explode)
    code = cli.main([
        "train", "--config", cfg, "--out", str(tmp_path / "x"),
        "--data", str(root / "ds" / "manifest.json"),
    ])
    assert code == 3


# ---------------------------------------------------------------------------
# translate


def test_translate_counts_and_ema_default(cli_workspace, tmp_path):
    root, _ = cli_workspace
    in_dir = root / "ds" / "images" / "M0"
    out_dir = tmp_path / "tx"
    code = cli.main([
        "translate", str(root / "run" / "ckpt_final.npz"),
        str(in_dir), "0", "1", str(out_dir),
    ])
    assert code == 0
    assert len(list(out_dir.glob("*.png"))) == len(list(in_dir.glob("*.png")))


def test_translate_identity_direction_works(cli_workspace, tmp_path):
    root, _ = cli_workspace
    out_dir = tmp_path / "tx_id"
    code = cli.main([
        "translate", str(root / "run" / "ckpt_final.npz"),
        str(root / "ds" / "images" / "M2"), "2", "2", str(out_dir), "--raw",
    ])
    assert code == 0
    assert len(list(out_dir.glob("*.png"))) > 0


def test_translate_bad_target_is_exit_2(cli_workspace, tmp_path):
    root, _ = cli_workspace
    code = cli.main([
        "translate", str(root / "run" / "ckpt_final.npz"),
        str(root / "ds" / "images" / "M0"), "0", "9", str(tmp_path / "x"),
    ])
    assert code == 2


# ---------------------------------------------------------------------------
# eval / train-segmenter


def test_eval_metric_filter_and_hash(cli_workspace, tmp_path):
    root, cfg = cli_workspace
    out = tmp_path / "ev"
    code = cli.main([
        "eval", "--config", cfg, "--out", str(out), "--seed", "1",
        "--ckpt", str(root / "run" / "ckpt_final.npz"),
        "--data", str(root / "ds" / "manifest.json"),
        "--metrics", "fid",
    ])
    assert code == 0
    report = json.loads((out / "metrics.json").read_text())
    for entry in report["per_modality"].values():
        assert set(entry) == {"fid"}
    assert report["checkpoint"].endswith("ckpt_final.npz")
    assert len(report["config_hash"]) == 16
    assert (out / "metrics.csv").read_text().startswith("modality,fid")


def test_eval_missing_segmenter_is_actionable(cli_workspace, tmp_path, capsys):
    root, cfg = cli_workspace
    code = cli.main([
        "eval", "--config", cfg, "--out", str(tmp_path / "ev2"),
        "--ckpt", str(root / "run" / "ckpt_final.npz"),
        "--data", str(root / "ds" / "manifest.json"),
        "--metrics", "s_score",
    ])
    assert code == 2
    assert "train-segmenter" in capsys.readouterr().err


def test_train_segmenter_then_eval_s_score(cli_workspace, tmp_path):
    root, cfg = cli_workspace
    seg_dir = tmp_path / "segs"
    code = cli.main([
        "train-segmenter", "--config", cfg, "--out", str(seg_dir), "--seed", "1",
        "--data", str(root / "ds" / "manifest.json"),
    ])
    assert code == 0
    for name in ("M0", "M1", "M2"):
        assert (seg_dir / f"segmenter_{name}.npz").exists()
    out = tmp_path / "ev3"
    code = cli.main([
        "eval", "--config", cfg, "--out", str(out), "--seed", "1",
        "--ckpt", str(root / "run" / "ckpt_final.npz"),
        "--data", str(root / "ds" / "manifest.json"),
        "--metrics", "s_score,seg",
        "--segmenters", str(seg_dir),
    ])
    assert code == 0
    report = json.loads((out / "metrics.json").read_text())
    assert set(report["per_modality"]["M0"]) == {"s_score", "dice", "ravd"}


def test_eval_unknown_metric_is_exit_2(cli_workspace, tmp_path, capsys):
    root, cfg = cli_workspace
    code = cli.main([
        "eval", "--config", cfg, "--out", str(tmp_path / "ev4"),
        "--ckpt", str(root / "run" / "ckpt_final.npz"),
        "--data", str(root / "ds" / "manifest.json"),
        "--metrics", "psnr",
    ])
    assert code == 2
    assert "psnr" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ablate


def test_ablate_writes_six_variant_rows(cli_workspace, tmp_path):
    root, cfg = cli_workspace
    out = tmp_path / "abl"
    code = cli.main([
        "ablate", "--config", cfg, "--out", str(out), "--seed", "1",
        "--data", str(root / "ds" / "manifest.json"),
    ])
    assert code == 0
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert lines[0] == "variant,M0,M1,M2,mean"
    names = [l.split(",")[0] for l in lines[1:]]
    assert names == ["wo_S_T_C", "wo_S_C", "wo_T_C", "wo_C", "wo_S", "full"]
    for name in names:
        assert (out / name / "seed_1" / "ckpt_final.npz").exists()
