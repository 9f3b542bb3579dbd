import numpy as np
import pytest

from meepo.cli import run
from meepo.pointcloud import PointCloud, read_cloud, write_cloud
from meepo.train import decode_checkpoint


def test_no_arguments_prints_usage(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run(["flops", "--arch", "mamba", "--L", "4", "--bogus"]) == 1
    assert "unrecognized" in capsys.readouterr().err


def test_flops_command(capsys):
    assert run(["flops", "--arch", "mamba", "--L", "1024", "--C", "64", "--N", "16", "--K", "4", "--E", "2"]) == 0
    assert capsys.readouterr().out.strip() == "34865152"
    assert run(["flops", "--arch", "mamba", "--L", "1024", "--N", "0"]) == 1


def test_inspect_two_voxels(tmp_path, capsys):
    path = tmp_path / "two.mpc"
    write_cloud(PointCloud(np.array([[3, 5, 7], [0, 0, 0]], np.float32), np.zeros((2, 3), np.float32)), path)
    assert run(["inspect", str(path), "--grid-size", "1"]) == 0
    out = capsys.readouterr().out
    assert out.index("\n0,0,0,0,0,1") < out.index("\n1,431,3,5,7,1")


def test_bad_file_is_data_error(tmp_path, capsys):
    path = tmp_path / "bad.mpc"
    path.write_bytes(b"JUNKJUNKJUNK")
    assert run(["inspect", str(path)]) == 2
    assert "magic" in capsys.readouterr().err


def test_gen_data_train_eval(tmp_path, capsys):
    assert run(["gen-data", "--out", str(tmp_path / "d"), "--num-scenes", "1", "--num-points", "600", "--seed", "3"]) == 0
    scenes = sorted((tmp_path / "d").glob("*.mpc"))
    assert len(scenes) == 1 and len(read_cloud(scenes[0])) == 600
    assert "seed = 3" in (tmp_path / "d" / "MANIFEST.txt").read_text()
    cfg = tmp_path / "c.cfg"
    cfg.write_text("encoder_depths = 1,1,1,1\ndecoder_depths = 0,0,0,0\ntrain.eval_every = 1\ntrain.batch_size = 1\n")
    ck = tmp_path / "m.mpk"
    argv = ["train", "--config", str(cfg), "--steps", "1", "--grid-size", "0.3", "--num-train", "1",
            "--num-val", "1", "--out", str(ck), "--seed", "4"]
    assert run(argv) == 0
    text, _ = decode_checkpoint(ck.read_bytes())
    assert "train.seed = 4" in text and "grid_size = 0.3" in text
    assert run(["eval", "--checkpoint", str(ck), "--data", str(scenes[0])]) == 0
    assert "mIoU" in capsys.readouterr().out


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert run(["describe", "--config", str(cfg)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_describe(capsys):
    assert run(["describe", "--voxels", "1000"]) == 0
    out = capsys.readouterr().out
    assert "enc.2.block.5" in out and "parameters" in out
