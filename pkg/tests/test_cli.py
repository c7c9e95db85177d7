import pytest

from semi3net.cli import main
from semi3net.losses import LossLog

SPEC = """\
num_categories = 3
per_category = 6
image_size = 8
data_seed = 4
stages = 1x4, 1x8
fc_dims = 16
embed_dim = 8
batch_size = 4
pretrain_epochs = 1
joint_epochs = 1
pretrain_lr = 1e-2
lr = 1e-3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(SPEC)
    assert main(["gen-data", "--spec", str(root / "run.cfg"), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--config", str(root / "run.cfg"),
                 "--out", str(root / "pre.ckpt")]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "run.cfg"),
                 "--init", str(root / "pre.ckpt"), "--out", str(root / "joint.ckpt"),
                 "--log", str(root / "joint.csv")]) == 0
    return root


def test_train_log_written(workdir):
    log = LossLog.read_csv(workdir / "joint.csv")
    assert len(log) == 4  # 15 training samples / batch 4


@pytest.mark.parametrize("source", ["image", "edgemap"])
def test_eval_prints_map_line(workdir, capsys, source):
    assert main(["eval", "--data", str(workdir / "data"), "--ckpt", str(workdir / "joint.ckpt"),
                 "--source", source]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("MAP=") and len(out.split(".")[1]) == 6
    assert 0.0 <= float(out[4:]) <= 1.0


def test_retrieve_top_three(workdir, capsys):
    assert main(["retrieve", "--ckpt", str(workdir / "joint.ckpt"), "--query", "5", "--top", "3",
                 "--data", str(workdir / "data")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    rows = [line.split(",") for line in lines]
    assert [r[0] for r in rows] == ["1", "2", "3"]
    dists = [float(r[2]) for r in rows]
    assert dists == sorted(dists)


def test_retrieve_unknown_query(workdir, capsys):
    assert main(["retrieve", "--ckpt", str(workdir / "joint.ckpt"), "--query", "999", "--top", "3",
                 "--data", str(workdir / "data")]) == 1
    assert "999" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--bogus"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_1(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((workdir / "joint.ckpt").read_bytes()[:100])
    assert main(["eval", "--data", str(workdir / "data"), "--ckpt", str(bad)]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    (tmp_path / "x.cfg").write_text("colour = red\n")
    assert main(["gen-data", "--spec", str(tmp_path / "x.cfg"), "--out", str(tmp_path / "d")]) == 1


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--per-tensor", "4"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out
