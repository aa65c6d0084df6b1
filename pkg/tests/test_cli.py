import json

import numpy as np
import pytest

from bodyfit.bodymodel import BodyParams, lbs_forward, make_toy_model, save_model
from bodyfit.cli import main
from bodyfit.landmarks import default_spec, extract_landmarks, load_spec, save_spec
from bodyfit.meshio import load_points, save_mesh, save_points
from bodyfit.pointcloud import PointCloud, TriMesh, sample_surface
from bodyfit.predictor import PredictorConfig, load_checkpoint, new_checkpoint, save_checkpoint
from bodyfit.adapter import load_adapter
from bodyfit.scalepred import load_scale_predictor

from conftest import random_params
from test_pointcloud import cube_mesh

ALLOC = (24, 15, 40)  # (hands, head, body): 79 landmarks on the small toy

TINY = PredictorConfig(
    num_landmarks=79,
    feature_dim=32,
    encoder_blocks=2,
    decoder_blocks=2,
    num_patches=16,
    patch_neighbors=4,
    attention_heads=2,
    mlp_hidden_dims=(32, 32),
)


def run_cli(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:  # argparse's own usage failures
        return int(e.code)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Model, spec, clouds, targets, and checkpoints on disk."""
    root = tmp_path_factory.mktemp("cli")
    toy = make_toy_model(120, 6, 0)
    paths = {"root": root, "assets": toy}

    paths["model"] = root / "toy.bft"
    save_model(toy, paths["model"])

    spec = default_spec(toy, allocation=ALLOC)
    paths["spec"] = root / "spec.json"
    save_spec(spec, paths["spec"])

    gt = random_params(toy, 42)
    verts, _ = lbs_forward(toy, gt)
    paths["gt_params"] = root / "gt_params.json"
    paths["gt_params"].write_text(json.dumps({
        "beta": gt.beta.tolist(),
        "theta": gt.theta.tolist(),
        "psi": gt.psi.tolist(),
        "trans": gt.trans.tolist(),
    }))
    paths["gt"] = gt

    cloud = sample_surface(TriMesh(verts, toy.faces), 400, seed=3)
    paths["cloud"] = root / "scan.xyz"
    save_points(cloud, paths["cloud"])

    targets = extract_landmarks(verts, spec)
    paths["landmarks"] = root / "targets.json"
    paths["landmarks"].write_text(json.dumps({"landmarks": targets.tolist()}))

    paths["ckpt"] = root / "predictor.bft"
    save_checkpoint(new_checkpoint(TINY, seed=0), paths["ckpt"])
    return paths


def _write_manifest(path, rows):
    path.write_text("\n".join(json.dumps(r) if isinstance(r, dict) else r for r in rows) + "\n")
    return path


# ------------------------------------------------------------- make-spec


def test_make_spec_writes_requested_allocation(ws, tmp_path):
    out = tmp_path / "spec.json"
    code = run_cli(["make-spec", "--model", ws["model"], "--out", out,
                    "--hands", 6, "--head", 5, "--body", 9])
    assert code == 0
    spec = load_spec(out)
    assert len(spec) == 20
    assert spec.allocation() == {"hand": 6, "head": 5, "body": 9}


def test_make_spec_default_emits_600(tmp_path_factory):
    root = tmp_path_factory.mktemp("spec600")
    big = make_toy_model(2400, 12, 1)
    model = root / "big.bft"
    save_model(big, model)
    out = root / "spec.json"
    assert run_cli(["make-spec", "--model", model, "--out", out]) == 0
    assert len(load_spec(out)) == 600


# ------------------------------------------------------- simulate-partial


def test_simulate_partial_cube_front_face(tmp_path):
    mesh_path = tmp_path / "cube.obj"
    save_mesh(cube_mesh(1.0), mesh_path)
    out = tmp_path / "partial.xyz"
    code = run_cli(["simulate-partial", "--mesh", mesh_path, "--view", "0,0,-1",
                    "--points", 300, "--out", out])
    assert code == 0
    cloud = load_points(out)
    assert cloud.points.shape == (300, 3)
    # camera looks along -z, so only the +z face survives
    assert np.allclose(cloud.points[:, 2], 0.5, atol=1e-9)


def test_simulate_partial_bad_view_is_usage_error(tmp_path, capsys):
    mesh_path = tmp_path / "cube.obj"
    save_mesh(cube_mesh(1.0), mesh_path)
    code = run_cli(["simulate-partial", "--mesh", mesh_path, "--view", "1,2",
                    "--out", tmp_path / "p.xyz"])
    assert code == 2
    assert "three components" in capsys.readouterr().err


def test_simulate_partial_missing_mesh_is_runtime_error(tmp_path, capsys):
    code = run_cli(["simulate-partial", "--mesh", tmp_path / "gone.obj",
                    "--view", "0,0,1", "--out", tmp_path / "p.xyz"])
    assert code == 1
    assert "gone.obj" in capsys.readouterr().err


# ------------------------------------------------------------------ eval


def test_eval_identical_params_zero_metrics(ws, tmp_path, capsys):
    out = tmp_path / "report.json"
    code = run_cli(["eval", "--model", ws["model"], "--pred", ws["gt_params"],
                    "--gt", ws["gt_params"], "--out", out])
    assert code == 0
    table = capsys.readouterr().out
    assert "V2V (cm)" in table and "MPJPE (cm)" in table
    payload = json.loads(out.read_text())
    assert payload["samples"] == 1
    assert all(v == 0.0 for v in payload["v2v_cm"].values())
    assert all(v == 0.0 for v in payload["mpjpe_cm"].values())


def test_eval_pairs_manifest(ws, tmp_path):
    manifest = _write_manifest(tmp_path / "pairs.jsonl", [
        {"pred": str(ws["gt_params"]), "gt": str(ws["gt_params"])},
        {"pred": str(ws["gt_params"]), "gt": str(ws["gt_params"])},
    ])
    out = tmp_path / "report.json"
    code = run_cli(["eval", "--model", ws["model"], "--pairs", manifest, "--out", out])
    assert code == 0
    assert json.loads(out.read_text())["samples"] == 2


def test_eval_pred_without_gt_is_usage_error(ws, capsys):
    code = run_cli(["eval", "--model", ws["model"], "--pred", ws["gt_params"]])
    assert code == 2
    assert "--gt" in capsys.readouterr().err


def test_eval_accepts_fit_report_wrapper(ws, tmp_path):
    report = {"params": json.loads(ws["gt_params"].read_text()), "rmse": 0.0}
    wrapped = tmp_path / "fitted.json"
    wrapped.write_text(json.dumps(report))
    out = tmp_path / "report.json"
    code = run_cli(["eval", "--model", ws["model"], "--pred", wrapped,
                    "--gt", ws["gt_params"], "--out", out])
    assert code == 0
    assert all(v == 0.0 for v in json.loads(out.read_text())["v2v_cm"].values())


# ------------------------------------------------------------------- fit


def test_fit_with_landmark_bypass_recovers_body(ws, tmp_path):
    out_dir = tmp_path / "fitout"
    code = run_cli(["fit", "--input", ws["cloud"], "--model", ws["model"],
                    "--spec", ws["spec"], "--landmarks", ws["landmarks"],
                    "--out", out_dir])
    assert code == 0
    report = json.loads((out_dir / "scan.report.json").read_text())
    assert report["rmse"] < 1e-3
    assert (out_dir / "scan.fitted.ply").is_file()
    assert (out_dir / "run_config.json").is_file()
    # the fitted mesh parses and matches the model size
    from bodyfit.meshio import load_mesh

    mesh = load_mesh(out_dir / "scan.fitted.ply")
    assert mesh.vertices.shape == (120, 3)


def test_fit_point_only_predictor_path(ws, tmp_path):
    out_dir = tmp_path / "fitout"
    code = run_cli(["fit", "--input", ws["cloud"], "--model", ws["model"],
                    "--spec", ws["spec"], "--checkpoint", ws["ckpt"],
                    "--assume-metric", "--out", out_dir])
    assert code == 0
    report = json.loads((out_dir / "scan.report.json").read_text())
    assert np.isfinite(report["rmse"])  # untrained predictor: poor but valid


def test_fit_accepts_mesh_input(ws, tmp_path):
    mesh_path = ws["root"] / "body.obj"
    verts, _ = lbs_forward(ws["assets"], ws["gt"])
    save_mesh(TriMesh(verts, ws["assets"].faces), mesh_path)
    out_dir = tmp_path / "fitout"
    code = run_cli(["fit", "--input", mesh_path, "--model", ws["model"],
                    "--spec", ws["spec"], "--landmarks", ws["landmarks"],
                    "--sample-points", 256, "--out", out_dir])
    assert code == 0
    assert (out_dir / "body.report.json").is_file()


def test_fit_image_without_adapter_exits_2(ws, tmp_path, capsys):
    code = run_cli(["fit", "--input", ws["cloud"], "--model", ws["model"],
                    "--spec", ws["spec"], "--checkpoint", ws["ckpt"],
                    "--image", "whatever.png", "--out", tmp_path / "o"])
    assert code == 2
    assert "--adapter" in capsys.readouterr().err


def test_fit_normalized_without_scale_option_exits_2(ws, tmp_path, capsys):
    code = run_cli(["fit", "--input", ws["cloud"], "--model", ws["model"],
                    "--spec", ws["spec"], "--landmarks", ws["landmarks"],
                    "--normalized", "--out", tmp_path / "o"])
    assert code == 2
    assert "--scale-checkpoint" in capsys.readouterr().err


def test_fit_needs_checkpoint_or_landmarks(ws, tmp_path):
    code = run_cli(["fit", "--input", ws["cloud"], "--model", ws["model"],
                    "--spec", ws["spec"], "--out", tmp_path / "o"])
    assert code == 2


def test_fit_print_config_runs_nothing(ws, tmp_path, capsys):
    out_dir = tmp_path / "fitout"
    code = run_cli(["fit", "--input", ws["cloud"], "--model", ws["model"],
                    "--spec", ws["spec"], "--landmarks", ws["landmarks"],
                    "--out", out_dir, "--print-config"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["inputs"] == [str(ws["cloud"])]
    assert not out_dir.exists()


def test_fit_multiple_inputs(ws, tmp_path):
    out_dir = tmp_path / "fitout"
    second = ws["root"] / "scan2.xyz"
    save_points(load_points(ws["cloud"]), second)
    code = run_cli(["fit", "--input", ws["cloud"], second, "--model", ws["model"],
                    "--spec", ws["spec"], "--landmarks", ws["landmarks"],
                    "--out", out_dir])
    assert code == 0
    assert (out_dir / "scan.report.json").is_file()
    assert (out_dir / "scan2.report.json").is_file()


# -------------------------------------------------------------training commands


def test_train_zero_epochs_writes_untrained_checkpoint(ws, tmp_path):
    manifest = _write_manifest(tmp_path / "train.jsonl", [
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"])},
    ])
    out = tmp_path / "ckpt.bft"
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "num_landmarks": 79, "feature_dim": 32, "encoder_blocks": 2,
        "decoder_blocks": 2, "num_patches": 16, "patch_neighbors": 4,
        "attention_heads": 2, "mlp_hidden_dims": [32, 32],
    }))
    code = run_cli(["train", "--manifest", manifest, "--config", config,
                    "--epochs", 0, "--out", out])
    assert code == 0
    ckpt = load_checkpoint(out)
    assert ckpt.step == 0
    assert ckpt.config.num_landmarks == 79
    assert (tmp_path / "ckpt.bft.run.json").is_file()


def test_train_and_resume_continues_steps(ws, tmp_path):
    manifest = _write_manifest(tmp_path / "train.jsonl", [
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"])},
    ] * 2)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "num_landmarks": 79, "feature_dim": 32, "encoder_blocks": 2,
        "decoder_blocks": 2, "num_patches": 16, "patch_neighbors": 4,
        "attention_heads": 2, "mlp_hidden_dims": [32, 32],
        "lr": 1e-4, "batch_size": 2,
    }))
    first = tmp_path / "first.bft"
    code = run_cli(["train", "--manifest", manifest, "--config", config,
                    "--epochs", 2, "--out", first])
    assert code == 0
    assert load_checkpoint(first).step == 2
    assert (tmp_path / "first.bft.log.jsonl").is_file()

    second = tmp_path / "second.bft"
    code = run_cli(["train", "--manifest", manifest, "--config", config,
                    "--epochs", 1, "--resume", first, "--out", second])
    assert code == 0
    assert load_checkpoint(second).step == 3


def test_train_flag_beats_config_file(ws, tmp_path, capsys):
    manifest = _write_manifest(tmp_path / "train.jsonl", [
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"])},
    ])
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"epochs": 7, "lr": 0.5}))
    code = run_cli(["train", "--manifest", manifest, "--config", config,
                    "--epochs", 1, "--out", tmp_path / "c.bft", "--print-config"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["epochs"] == 1  # flag wins
    assert payload["lr"] == 0.5  # config file beats default
    assert not (tmp_path / "c.bft").exists()  # print-config only resolves


def test_train_unknown_config_key_is_usage_error(ws, tmp_path, capsys):
    manifest = _write_manifest(tmp_path / "train.jsonl", [
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"])},
    ])
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"learning_rate": 1e-3}))
    code = run_cli(["train", "--manifest", manifest, "--config", config,
                    "--out", tmp_path / "c.bft"])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_manifest_violations_list_line_numbers(ws, tmp_path, capsys):
    manifest = _write_manifest(tmp_path / "bad.jsonl", [
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"])},
        "not json {",
        {"landmarks": str(ws["landmarks"])},
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"]), "bogus": "x"},
    ])
    code = run_cli(["train", "--manifest", manifest, "--epochs", 0,
                    "--out", tmp_path / "c.bft"])
    assert code == 2
    err = capsys.readouterr().err
    assert "line 2: invalid JSON" in err
    assert "line 3: missing key 'cloud'" in err
    assert "line 4: unknown keys ['bogus']" in err


def test_train_adapter_zero_epochs_and_required_base(ws, tmp_path):
    from PIL import Image

    img_path = tmp_path / "view.png"
    Image.fromarray(np.full((32, 32, 3), 128, dtype=np.uint8)).save(img_path)
    manifest = _write_manifest(tmp_path / "ad.jsonl", [
        {"cloud": str(ws["cloud"]), "landmarks": str(ws["landmarks"]),
         "image": str(img_path)},
    ])
    out = tmp_path / "adapter.bft"
    code = run_cli(["train-adapter", "--manifest", manifest,
                    "--base-checkpoint", ws["ckpt"], "--out", out,
                    "--epochs", 0, "--image-dim", 16, "--patch-size", 16])
    assert code == 0
    adapter = load_adapter(out)
    assert len(adapter.branches) == TINY.decoder_blocks

    # refuses without the base checkpoint
    assert run_cli(["train-adapter", "--manifest", manifest, "--out", out]) == 2


def test_train_scale_writes_checkpoint(ws, tmp_path):
    manifest = _write_manifest(tmp_path / "sc.jsonl", [
        {"cloud": str(ws["cloud"])},
    ])
    out = tmp_path / "scale.bft"
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "feature_dim": 32, "encoder_blocks": 1, "num_patches": 8,
        "patch_neighbors": 4, "attention_heads": 2, "mlp_hidden_dims": [32],
    }))
    code = run_cli(["train-scale", "--manifest", manifest, "--config", config,
                    "--epochs", 1, "--lr", 1e-4, "--out", out])
    assert code == 0
    weights = load_scale_predictor(out)
    assert weights.step == 1
    assert weights.config.feature_dim == 32
