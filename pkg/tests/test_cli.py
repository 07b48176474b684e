import numpy as np
import pytest

from minircnn.checkpoint import load_checkpoint
from minircnn.cli import main
from minircnn.data import load_manifest
from minircnn.ppm import load_ppm, save_ppm


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared tiny dataset + checkpoint so CLI tests stay fast."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate-data", "--out", str(data), "--images", "12",
                 "--classes", "2", "--seed", "5", "--image-size", "64",
                 "--shapes-min", "1", "--shapes-max", "1"]) == 0
    ckpt = root / "model.ckpt"
    assert main(["train", "--manifest", str(data / "manifest.tsv"),
                 "--out", str(ckpt), "--iterations", "8", "--image-size", "64",
                 "--anchor-base-size", "32", "--rpn-batch", "32",
                 "--head-batch", "8", "--seed", "5", "--quiet"]) == 0
    return {"root": root, "data": data, "ckpt": ckpt}


def test_generate_data_counts_and_determinism(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        code, _, _ = run(capsys, "generate-data", "--out", str(out),
                         "--images", "6", "--classes", "3", "--seed", "9",
                         "--image-size", "64")
        assert code == 0
    ppms = sorted(p.name for p in a.glob("*.ppm"))
    assert len(ppms) == 6
    for name in ppms + ["manifest.tsv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = load_manifest(a / "manifest.tsv")
    assert len(manifest.annotations) == 6
    assert manifest.split is not None


def test_generate_data_unwritable_dir(capsys):
    code, _, err = run(capsys, "generate-data", "--out",
                       "/proc/definitely/not/writable", "--images", "1")
    assert code == 2
    assert err.strip()


def test_train_writes_checkpoint_and_csv(workspace):
    ckpt = load_checkpoint(workspace["ckpt"])
    assert ckpt.iteration == 8
    assert ckpt.loss_history.shape == (8, 5)
    csv = workspace["root"] / "model.ckpt.loss.csv"
    lines = csv.read_text().strip().split("\n")
    assert lines[0].startswith("iteration,")
    assert len(lines) == 9


def test_train_zero_iterations(workspace, capsys, tmp_path):
    out = tmp_path / "init.ckpt"
    code, _, _ = run(capsys, "train", "--manifest",
                     str(workspace["data"] / "manifest.tsv"), "--out", str(out),
                     "--iterations", "0", "--image-size", "64", "--quiet")
    assert code == 0
    ckpt = load_checkpoint(out)
    assert ckpt.iteration == 0
    assert ckpt.loss_history.shape[0] == 0


def test_train_missing_manifest(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--manifest",
                       str(tmp_path / "absent.tsv"), "--out",
                       str(tmp_path / "x.ckpt"))
    assert code == 2
    assert err.strip()


def test_train_prints_loss_lines(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--manifest",
                       str(workspace["data"] / "manifest.tsv"),
                       "--out", str(tmp_path / "m.ckpt"), "--iterations", "2",
                       "--image-size", "64", "--rpn-batch", "32",
                       "--head-batch", "8")
    assert code == 0
    lines = [l for l in out.split("\n") if l.startswith("step ")]
    assert len(lines) == 2
    assert "rpn_cls=" in lines[0] and "total=" in lines[0]


def test_detect_output_format(workspace, capsys):
    image = next(iter(workspace["data"].glob("*.ppm")))
    code, out, _ = run(capsys, "detect", "--ckpt", str(workspace["ckpt"]),
                       "--image", str(image), "--threshold", "0.0")
    assert code == 0
    for line in filter(None, out.split("\n")):
        fields = line.split("\t")
        assert len(fields) == 3
        assert 0.0 <= float(fields[1]) < 1.0
        assert len(fields[2].split()) == 4


def test_detect_threshold_one_empty(workspace, capsys):
    image = next(iter(workspace["data"].glob("*.ppm")))
    code, out, _ = run(capsys, "detect", "--ckpt", str(workspace["ckpt"]),
                       "--image", str(image), "--threshold", "1.0")
    assert code == 0
    assert out.strip() == ""


def test_detect_annotate_only_touches_rectangles(workspace, capsys, tmp_path):
    image = next(iter(workspace["data"].glob("*.ppm")))
    out_ppm = tmp_path / "annotated.ppm"
    code, out, _ = run(capsys, "detect", "--ckpt", str(workspace["ckpt"]),
                       "--image", str(image), "--threshold", "0.0",
                       "--annotate", str(out_ppm))
    assert code == 0
    original = load_ppm(image).data
    annotated = load_ppm(out_ppm).data
    diff = np.argwhere((original != annotated).any(axis=0))
    n_det = len([l for l in out.split("\n") if l.strip()])
    if n_det == 0:
        assert diff.size == 0
    else:
        assert diff.size > 0
        # every changed pixel is white (the overlay color)
        ys, xs = diff.T
        assert np.allclose(annotated[:, ys, xs], 1.0)


def test_eval_reports(workspace, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", str(workspace["ckpt"]),
                       "--manifest", str(workspace["data"] / "manifest.tsv"))
    assert code == 0
    assert "accuracy:" in out
    code, out, _ = run(capsys, "eval", "--ckpt", str(workspace["ckpt"]),
                       "--manifest", str(workspace["data"] / "manifest.tsv"),
                       "--tsv")
    assert code == 0
    assert out.startswith("class\tgt\tmatched")


def test_benchmark_runs(workspace, capsys):
    image = next(iter(workspace["data"].glob("*.ppm")))
    code, out, _ = run(capsys, "benchmark", "--ckpt", str(workspace["ckpt"]),
                       "--image", str(image), "--runs", "5", "--warmup", "1")
    assert code == 0
    assert "runs\t5" in out
    assert out.startswith("stage\tms")


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing required flags
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--ckpt", "x", "--image", "y", "--no-such-flag"])
    assert exc.value.code == 1


def test_corrupt_checkpoint_exit_2(capsys, tmp_path, workspace):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    image = next(iter(workspace["data"].glob("*.ppm")))
    code, _, err = run(capsys, "detect", "--ckpt", str(bad), "--image", str(image))
    assert code == 2
    assert "error" in err
