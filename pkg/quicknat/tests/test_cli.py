import numpy as np
import pandas as pd

from quicknat.main import main
from quicknat.models.network import NetworkPreset
from quicknat.models.volumes import LabelSpace, View
from quicknat.services.checkpoint_service import load_checkpoint, save_checkpoint
from quicknat.services.network_service import ViewNetwork, init_params
from quicknat.services.volume_service import read_label_volume

SPACE = LabelSpace.phantom(4)


def _phantoms(out, count=1, seed=0, *extra):
    argv = ["phantom", "--count", str(count), "--grid", "16", "--classes", "4", "--seed", str(seed), "--out", str(out)]
    assert main(argv + list(extra)) == 0


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "1", "--sample", "4"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("check")
    assert "FAIL" not in out


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["gradcheck", "--no-such-flag"]) == 1
    assert "error:" in capsys.readouterr().err
    assert main([]) == 1


def test_missing_checkpoint_is_a_data_error(tmp_path, capsys):
    assert main(["segment", str(tmp_path / "scan.nii"), "--checkpoints", str(tmp_path)]) == 2
    assert str(tmp_path / "finetune_coronal.ckpt") in capsys.readouterr().err


def test_phantom_writes_image_labels_and_aux(tmp_path):
    _phantoms(tmp_path, 2, 0, "--corruption", "0.2")
    names = sorted(p.name for p in tmp_path.glob("*.nii"))
    assert names == [f"phantom{i:03d}_{kind}.nii" for i in range(2) for kind in ("aux", "image", "labels")]
    assert read_label_volume(tmp_path / "phantom000_labels.nii").data.max() == 3


def test_phantom_rejects_bad_settings():
    assert main(["phantom", "--classes", "9"]) == 1
    assert main(["phantom", "--count", "0"]) == 1


def test_evaluate_writes_reports(tmp_path, capsys):
    _phantoms(tmp_path)
    labels = str(tmp_path / "phantom000_labels.nii")
    out = tmp_path / "report"
    argv = ["evaluate", labels, labels, "--label-space", "phantom", "--classes", "4", "--subject", "s1", "--out", str(out)]
    assert main(argv) == 0
    frame = pd.read_csv(out / "s1_metrics.csv")
    assert list(frame["structure"]) == ["Shell", "Lobe Left", "Lobe Right"]
    assert (frame["dice"] == 1.0).all()
    assert (out / "s1_metrics.json").is_file()
    assert "mean dice 1.0000" in capsys.readouterr().out
    assert main(argv + ["--scheme", "freesurfer"]) == 1


def test_consistency_prints_distances(tmp_path, capsys):
    _phantoms(tmp_path)
    labels = str(tmp_path / "phantom000_labels.nii")
    assert main(["consistency", labels, labels, "--label-space", "phantom", "--classes", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "structure,volume_distance"
    assert lines[1:] == ["Shell,0.000000", "Lobe Left,0.000000", "Lobe Right,0.000000"]


def test_segment_with_saved_checkpoints(tmp_path, capsys):
    _phantoms(tmp_path)
    checkpoints = tmp_path / "ckpt"
    for view in View:
        preset = NetworkPreset.for_view("miniature", view, SPACE, num_channels=4)
        net = ViewNetwork(init_params(0, preset), view)
        save_checkpoint(net, checkpoints / f"finetune_{view.value}.ckpt", label_space="phantom", label_space_classes=4)
    out = tmp_path / "seg"
    argv = ["segment", str(tmp_path / "phantom000_image.nii"), "--checkpoints", str(checkpoints), "--out", str(out)]
    assert main(argv) == 0
    seg = read_label_volume(out / "phantom000_image_seg.nii")
    assert seg.shape == (16, 16, 16)
    assert seg.data.max() < 4
    assert capsys.readouterr().out.strip().endswith("phantom000_image_seg.nii")
    assert main(argv + ["--lambda", "1,2"]) == 1


def test_pretrain_then_finetune(tmp_path):
    _phantoms(tmp_path / "train", 2, 0)
    _phantoms(tmp_path / "val", 1, 5)
    config = tmp_path / "run.txt"
    config.write_text(
        "\n".join(
            [
                f"train_dir = {tmp_path / 'train'}",
                f"val_dir = {tmp_path / 'val'}",
                f"init_dir = {tmp_path / 'out'}",
                f"out_dir = {tmp_path / 'out'}",
                "label_space = phantom",
                "num_classes = 4",
                "num_channels = 4",
                "views = coronal",
                "max_epochs = 1",
            ]
        )
    )
    assert main(["pretrain", "--config", str(config), "--seed", "2"]) == 0
    checkpoint = load_checkpoint(tmp_path / "out" / "pretrain_coronal.ckpt")
    assert checkpoint.label_space == SPACE
    assert checkpoint.network.params["classifier.weight"].data.dtype == np.float32
    assert (tmp_path / "out" / "history_pretrain_coronal.csv").is_file()
    assert "seed = 2" in (tmp_path / "out" / "pretrain_config.txt").read_text()

    assert main(["finetune", "--config", str(config)]) == 0
    assert load_checkpoint(tmp_path / "out" / "finetune_coronal.ckpt").meta["stage"] == "finetune"


def test_finetune_without_pretrained_checkpoint(tmp_path, capsys):
    _phantoms(tmp_path / "train", 1, 0)
    config = tmp_path / "run.txt"
    config.write_text(f"train_dir = {tmp_path / 'train'}\nval_dir = {tmp_path / 'train'}\ninit_dir = {tmp_path / 'none'}\n"
                      "label_space = phantom\nnum_classes = 4\nviews = axial\n")
    assert main(["finetune", "--config", str(config), "--out", str(tmp_path / "out")]) == 2
    assert "pretrain_axial.ckpt" in capsys.readouterr().err


def test_pretrain_refuses_finetune_config(tmp_path):
    config = tmp_path / "run.txt"
    config.write_text("stage = finetune\n")
    assert main(["pretrain", "--config", str(config)]) == 1
