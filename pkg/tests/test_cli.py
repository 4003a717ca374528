import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from rsrnet.cli import main
from rsrnet.core import format_config, load_checkpoint

TINY = """input_size = 32
stem_channels = 8
encoder_channels = 8, 12, 16
feature_dim = 8
gru_hidden_dim = 12
sim_branch_channels = 4
mask_branch_channels = 4
upsample_hidden_dim = 16
num_iterations = 3
batch_size = 4
"""


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["generate-data", "--n", "10", "--size", "32", "--seed", "5", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--config", str(cfg), "--steps", "2"]) == 0
    return root


def test_generate_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["generate-data", "--n", "6", "--size", "32", "--seed", "42", "--out", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    out = capsys.readouterr().out
    max_area = float(out.split("max ")[-1].split()[0])
    assert max_area < 0.5


def test_generate_data_errors(tmp_path):
    assert main(["generate-data", "--n", "0", "--out", str(tmp_path / "x")]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate-data", "--n", "2", "--out", str(blocker / "sub")]) == 1


def test_usage_errors_exit_1(capsys):
    assert main(["nonsense"]) == 1
    assert main(["train", "--bogus-flag"]) == 1
    assert "usage" in capsys.readouterr().err


def test_every_command_takes_seed_and_config(capsys):
    for cmd in ("generate-data", "train", "eval", "infer", "visualize", "ablate", "complexity"):
        assert main([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        assert "--seed" in text and "--config" in text


def test_env_output_override(tmp_path, monkeypatch):
    monkeypatch.setenv("RSRNET_OUTPUT_DIR", str(tmp_path))
    assert main(["generate-data", "--n", "2", "--size", "32", "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "train.txt").exists()


def test_train_outputs(workspace):
    run = workspace / "run"
    rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert {"step", "lr", "total", "bce", "ssim", "iou"} <= set(rows[0])
    ck = load_checkpoint(run / "final.ckpt")
    assert ck.step == 2 and ck.config.input_size == 32


def test_config_file_overrides_flags(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + "num_iterations = 2\n")
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"),
                 "--config", str(cfg), "--num-iterations", "5", "--steps", "1"]) == 0
    assert load_checkpoint(tmp_path / "r" / "final.ckpt").config.num_iterations == 2


def test_train_ablate_no_gru(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"),
                 "--config", str(workspace / "tiny.cfg"), "--ablate", "no_gru", "--steps", "1"]) == 0
    ck = load_checkpoint(tmp_path / "r" / "final.ckpt")
    assert ck.config.no_gru
    assert not any(".gru." in k for k in ck.params) and any(".plain." in k for k in ck.params)


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1
    assert "missing" in capsys.readouterr().err


def test_train_nan_exits_2(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + "lr = 1e30\n")
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"),
                 "--config", str(cfg), "--steps", "20"]) == 2
    dump = json.loads((tmp_path / "r" / "nan_dump.json").read_text())
    assert dump["batch_ids"]


def test_eval_table(workspace, tmp_path, capsys):
    rec = tmp_path / "rec.jsonl"
    assert main(["eval", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--data", str(workspace / "data"), "--records", str(rec)]) == 0
    out = capsys.readouterr().out
    assert "AP(%)↑" in out and "F1↑" in out and "IoU(%)↑" in out
    assert "m_rsr" in out and "m_dec" in out
    assert len(rec.read_text().splitlines()) == 2


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    missing = tmp_path / "none.ckpt"
    assert main(["eval", "--checkpoint", str(missing), "--data", str(workspace / "data")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_eval_mismatched_config(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("no_msm = true\n")
    assert main(["eval", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--data", str(workspace / "data"), "--config", str(cfg)]) == 1


def test_infer_dump_all(workspace, tmp_path):
    img = workspace / "data" / "images" / "00000.png"
    assert main(["infer", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--input", str(img), "--out", str(tmp_path / "o"), "--dump-all"]) == 0
    files = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert files == ["00000_g.png", "00000_m_dec.png", "00000_m_fnl.png", "00000_m_rsr.png"]
    m = np.asarray(Image.open(tmp_path / "o" / "00000_m_fnl.png"))
    assert m.dtype == np.uint8 and m.shape == (32, 32)
    assert main(["infer", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--input", str(img), "--out", str(tmp_path / "p")]) == 0
    assert [p.name for p in (tmp_path / "p").iterdir()] == ["00000_m_fnl.png"]


def test_visualize(workspace, tmp_path):
    data = workspace / "data"
    assert main(["visualize", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--image", str(data / "images" / "00001.png"), "--mask", str(data / "masks" / "00001.png"),
                 "--out", str(tmp_path / "v")]) == 0
    names = {p.name for p in (tmp_path / "v").iterdir()}
    assert sum(n.endswith("_mask.png") for n in names) == 3
    sims = sorted(n for n in names if "_sim_" in n)
    assert {n.split("_sim_")[1] for n in sims} == {"l0.png", "l3.png"} and len(sims) == 6
    panel = np.asarray(Image.open(tmp_path / "v" / "fusion_panel.png"))
    assert panel.shape == (32, 5 * 32 + 4 * 2, 3)


def test_complexity_checkpoint(workspace, capsys):
    assert main(["complexity", "--checkpoint", str(workspace / "run" / "final.ckpt"), "--timing-runs", "1"]) == 0
    out = capsys.readouterr().out
    assert "RSR module" in out and "(match)" in out


def test_ablate_rows(workspace, tmp_path, capsys):
    assert main(["ablate", "--data", str(workspace / "data"), "--rows", "1,9", "--seeds", "1",
                 "--config", str(workspace / "tiny.cfg"), "--steps", "1", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    table, breakdown = out.split("per-mask breakdown")
    body = [l for l in table.strip().splitlines()[1:]]
    assert len(body) == 2 and body[0].split()[0] == "1" and body[1].split()[0] == "9"
    assert "m_rsr" in breakdown and len(breakdown.strip().splitlines()) == 3
    recs = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert [(r["row"], r["seed"]) for r in recs] == [(1, 1), (9, 1)]


def test_ablate_bad_rows(workspace, tmp_path):
    assert main(["ablate", "--data", str(workspace / "data"), "--rows", "0,12", "--out", str(tmp_path / "a")]) == 1


def test_rerun_is_idempotent(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.cfg"), "--steps", "2"]
    assert main(args + ["--out", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x" / "final.ckpt").read_bytes() == (workspace / "run" / "final.ckpt").read_bytes()


def test_format_config_loadable_by_cli(workspace, tmp_path):
    ck = load_checkpoint(workspace / "run" / "final.ckpt")
    cfg = tmp_path / "full.cfg"
    cfg.write_text(format_config(ck.config))
    assert main(["complexity", "--config", str(cfg), "--timing-runs", "1"]) == 0
