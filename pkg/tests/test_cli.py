import json
import shutil

import jsonschema
import numpy as np
import pytest

from ropeinspect import schemas
from ropeinspect.cli import main
from ropeinspect.data import write_color

SEG_MODEL = {"encoder_channels": [8, 16, 32]}
DET_MODEL = {"variant": "V3_5", "stem_channels": [8, 8, 16], "stage_conv_channels": [8, 8, 12, 12],
             "stage_out_channels": [16, 24, 32, 40]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["fixture", "--out", str(root / "ds"), "--n", "6", "--seed", "3"]) == 0
    for task, model, size in (("seg", SEG_MODEL, 64), ("det", DET_MODEL, 64)):
        cfg = {"task": task, "train_manifest": "ds/manifest.json", "output_dir": f"run_{task}",
               "epochs": 2, "batch_size": 3, "input_size": size, "model": model}
        (root / f"{task}.json").write_text(json.dumps(cfg))
        assert main(["train", "--task", task, "--config", str(root / f"{task}.json")]) == 0
    return root


def test_train_outputs(workspace):
    for task in ("seg", "det"):
        run = workspace / f"run_{task}"
        for name in (f"{task}_best.pt", f"{task}_last.pt", "history.csv", "history.png", "config.json"):
            assert (run / name).is_file(), name


def test_eval_seg(workspace, capsys):
    out = workspace / "eval_seg"
    assert main(["eval", "--task", "seg", "--ckpt", str(workspace / "run_seg/seg_best.pt"),
                 "--dataset", str(workspace / "ds"), "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, schemas.METRICS_REPORT)
    assert doc["fps"] > 0 and doc["n_images"] == 6
    assert (out / "scores.png").is_file()
    assert (out / "per_image.csv").read_text().startswith("image,max_f")
    assert json.loads(capsys.readouterr().out) == doc


def test_eval_det_with_seg_masks(workspace):
    out = workspace / "eval_det"
    assert main(["eval", "--task", "det", "--ckpt", str(workspace / "run_det/det_best.pt"),
                 "--dataset", str(workspace / "ds"), "--out", str(out), "--no-speed",
                 "--seg-ckpt", str(workspace / "run_seg/seg_best.pt")]) == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, schemas.METRICS_REPORT)
    assert "accuracy_seg_masks" in doc["extra"] and doc["fps"] is None
    assert (out / "confusion.png").is_file()


def test_eval_task_mismatch(workspace):
    code = main(["eval", "--task", "det", "--ckpt", str(workspace / "run_seg/seg_best.pt"),
                 "--dataset", str(workspace / "ds")])
    assert code == 3


def test_infer(workspace):
    out = workspace / "infer"
    assert main(["infer", "--seg-ckpt", str(workspace / "run_seg/seg_best.pt"),
                 "--det-ckpt", str(workspace / "run_det/det_best.pt"),
                 "--input", str(workspace / "ds"), "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, schemas.INFER_REPORT)
    assert doc["summary"]["n_images"] == 6
    for img in doc["images"]:
        assert img["status"] == "ok"
        assert (out / img["saliency"]).is_file() and (out / img["overlay"]).is_file()
        if img["label"] != "no-rope-found":
            assert 0 <= img["confidence"] <= 1 and (out / img["extracted"]).is_file()


def test_infer_gt_masks_and_bad_image(workspace):
    ds = workspace / "ds_broken"
    shutil.copytree(workspace / "ds", ds)
    (ds / "color" / "fx3_0000.png").write_bytes(b"broken")
    out = workspace / "infer_gt"
    assert main(["infer", "--seg-ckpt", str(workspace / "run_seg/seg_best.pt"),
                 "--det-ckpt", str(workspace / "run_det/det_best.pt"), "--use-gt-masks",
                 "--input", str(ds), "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, schemas.INFER_REPORT)
    status = {i["id"]: i["status"] for i in doc["images"]}
    assert status["fx3_0000"] == "error" and doc["summary"]["n_errors"] == 1
    assert all(v == "ok" for k, v in status.items() if k != "fx3_0000")


def test_infer_plain_folder(workspace):
    folder = workspace / "plain"
    folder.mkdir()
    write_color(folder / "a.png", np.zeros((64, 64, 3), np.uint8))
    out = workspace / "infer_plain"
    assert main(["infer", "--seg-ckpt", str(workspace / "run_seg/seg_best.pt"),
                 "--det-ckpt", str(workspace / "run_det/det_best.pt"),
                 "--input", str(folder), "--out", str(out)]) == 0
    jsonschema.validate(json.loads((out / "report.json").read_text()), schemas.INFER_REPORT)


def test_reparam(workspace, capsys):
    src = workspace / "run_det/det_best.pt"
    dst = workspace / "fused.pt"
    assert main(["reparam", "--ckpt-in", str(src), "--ckpt-out", str(dst), "--size", "64"]) == 0
    doc = json.loads(capsys.readouterr().out)
    jsonschema.validate(doc, schemas.REPARAM_REPORT)
    assert doc["params_after"] < doc["params_before"] and doc["max_abs_deviation"] < 1e-4
    assert not doc["already_fused"]
    with pytest.warns(UserWarning, match="already fused"):
        assert main(["reparam", "--ckpt-in", str(dst), "--ckpt-out", str(workspace / "f2.pt"),
                     "--size", "64"]) == 0
    assert (workspace / "f2.pt").read_bytes() == dst.read_bytes()
    # the fused checkpoint still evaluates
    assert main(["eval", "--task", "det", "--ckpt", str(dst), "--dataset", str(workspace / "ds"),
                 "--no-speed"]) == 0


def test_augment(workspace, capsys):
    bg = workspace / "bg"
    bg.mkdir()
    write_color(bg / "sky.png", np.full((48, 48, 3), 180, np.uint8))
    out = workspace / "aug"
    assert main(["augment", "--dataset", str(workspace / "ds"), "--backgrounds", str(bg),
                 "--fraction", "0.5", "--out", str(out), "--seed", "1"]) == 0
    assert json.loads(capsys.readouterr().out) == {"source": 6, "generated": 3, "total": 9}
    jsonschema.validate(json.loads((out / "provenance.json").read_text()), schemas.PROVENANCE)


def test_usage_errors(workspace, tmp_path):
    ds = str(workspace / "ds")
    assert main(["augment", "--dataset", ds, "--backgrounds", str(tmp_path),
                 "--fraction", "0", "--out", str(tmp_path / "o")]) == 2
    assert main(["augment", "--dataset", ds, "--backgrounds", str(tmp_path),
                 "--fraction", "0.5", "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text('{"task": "seg", "epochs": "x"}')
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["eval", "--task", "seg", "--ckpt", str(workspace / "run_seg/seg_best.pt"),
                 "--dataset", str(tmp_path / "none")]) == 2
    assert main(["fixture", "--out", str(tmp_path / "f"), "--size", "50"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_corrupted_checkpoint_exit_code(workspace, tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"PK\x03\x04 truncated")
    assert main(["eval", "--task", "seg", "--ckpt", str(bad), "--dataset", str(workspace / "ds")]) == 3
    assert main(["reparam", "--ckpt-in", str(bad), "--ckpt-out", str(tmp_path / "o.pt")]) == 3


def test_global_flags_after_subcommand(tmp_path):
    assert main(["fixture", "--out", str(tmp_path / "a"), "--n", "2", "--seed", "5"]) == 0
    assert main(["--seed", "5", "fixture", "--out", str(tmp_path / "b"), "--n", "2"]) == 0
    a = (tmp_path / "a" / "color" / "fx5_0000.png").read_bytes()
    assert a == (tmp_path / "b" / "color" / "fx5_0000.png").read_bytes()
