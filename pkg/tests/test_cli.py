import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from ddit.cli import build_parser, main
from ddit.errors import ConfigError
from ddit.runconfig import build_settings, load_ini, write_effective_ini

GOLDEN_DIR = Path(__file__).parent / "data"

TINY_INI = """\
[model]
hidden = 32
depth = 2
heads = 2
patch = 2
latent_channels = 48
text_dim = 16
text_len_max = 8
vocab_size = 16
freq_dim = 16

[train]
objective = ddpm
max_steps = 6
batch_size = 4
warmup_steps = 2
base_lr = 1e-3
ema_decay = 0.99
checkpoint_every = 5
seed = 3

[sampler]
steps = 4
"""


@pytest.fixture(autouse=True)
def _fixed_columns(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    monkeypatch.delenv("DDIT_SEED", raising=False)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Dataset plus one tiny CLI-trained run shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--n", "24", "--seed", "5", "--out", str(data)]) == 0
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    run = root / "run"
    code = main(["train", "--preset", "toy", "--config", str(ini),
                 "--data", str(data), "--out", str(run)])
    assert code == 0
    return {"root": root, "data": data, "ini": ini, "run": run}


def test_gen_data_counts_and_determinism(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["gen-data", "--n", "16", "--seed", "7", "--out", str(out_a)]) == 0
    assert main(["gen-data", "--n", "16", "--seed", "7", "--out", str(out_b)]) == 0
    manifest_a = (out_a / "manifest.jsonl").read_bytes()
    manifest_b = (out_b / "manifest.jsonl").read_bytes()
    assert len(manifest_a.splitlines()) == 16
    assert hashlib.sha256(manifest_a).hexdigest() == hashlib.sha256(manifest_b).hexdigest()
    assert len(list(out_a.glob("*/*.png"))) == 48


def test_gen_data_missing_out_flag():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "4"])
    assert exc.value.code == 2


def test_gen_data_rejects_zero(tmp_path):
    assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "x")]) == 3


def test_gen_data_env_seed(tmp_path, monkeypatch):
    out_env = tmp_path / "env"
    out_flag = tmp_path / "flag"
    monkeypatch.setenv("DDIT_SEED", "7")
    assert main(["gen-data", "--n", "4", "--out", str(out_env)]) == 0
    monkeypatch.delenv("DDIT_SEED")
    assert main(["gen-data", "--n", "4", "--seed", "7", "--out", str(out_flag)]) == 0
    assert (out_env / "manifest.jsonl").read_bytes() == (out_flag / "manifest.jsonl").read_bytes()


def test_train_produces_artifacts(cli_workspace):
    run = cli_workspace["run"]
    assert (run / "loss.csv").exists()
    assert (run / "ckpt_final.bin").exists()
    assert (run / "ckpt_final.json").exists()
    assert (run / "effective.ini").exists()
    sidecar = json.loads((run / "ckpt_final.json").read_text())
    assert sidecar["step"] == 6
    assert sidecar["train"]["objective"] == "ddpm"


def test_train_bad_objective(cli_workspace):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--objective", "xyz", "--data", "d", "--out", "o"])
    assert exc.value.code == 2


def test_train_resume_continues(cli_workspace, tmp_path):
    run = cli_workspace["run"]
    out = tmp_path / "resumed"
    code = main(["train", "--resume", str(run / "ckpt_0000005"),
                 "--data", str(cli_workspace["data"]), "--out", str(out)])
    assert code == 0
    sidecar = json.loads((out / "ckpt_final.json").read_text())
    assert sidecar["step"] == 6


def test_sample_writes_image(cli_workspace, tmp_path):
    run = cli_workspace["run"]
    mask = cli_workspace["data"] / "masks" / "000001.png"
    out = tmp_path / "gen.png"
    code = main([
        "sample", "--ckpt", str(run / "ckpt_final"), "--condition", str(mask),
        "--modality", "mask", "--caption", "HAIR_RED EYES_BLUE",
        "--cfg-scale", "4", "--steps", "4", "--sampler", "ddim",
        "--seed", "1", "--out", str(out),
    ])
    assert code == 0
    img = np.asarray(Image.open(out))
    assert img.shape == (32, 32, 3)


def test_sample_grid_tiles(cli_workspace, tmp_path):
    run = cli_workspace["run"]
    mask = cli_workspace["data"] / "masks" / "000002.png"
    out = tmp_path / "grid.png"
    code = main([
        "sample", "--ckpt", str(run / "ckpt_final"), "--condition", str(mask),
        "--steps", "2", "--grid", "4", "--seed", "3", "--out", str(out),
    ])
    assert code == 0
    img = np.asarray(Image.open(out))
    assert img.shape == (64, 64, 3)


def test_sample_objective_mismatch_is_usage_error(cli_workspace, tmp_path):
    run = cli_workspace["run"]
    mask = cli_workspace["data"] / "masks" / "000001.png"
    code = main([
        "sample", "--ckpt", str(run / "ckpt_final"), "--condition", str(mask),
        "--sampler", "euler", "--steps", "2", "--out", str(tmp_path / "x.png"),
    ])
    assert code == 2


def test_sample_unknown_caption_token(cli_workspace, tmp_path):
    run = cli_workspace["run"]
    mask = cli_workspace["data"] / "masks" / "000001.png"
    code = main([
        "sample", "--ckpt", str(run / "ckpt_final"), "--condition", str(mask),
        "--caption", "HAIR_NEON", "--steps", "2", "--out", str(tmp_path / "x.png"),
    ])
    assert code == 3


def test_eval_report(cli_workspace, tmp_path, capsys):
    run = cli_workspace["run"]
    out = tmp_path / "eval"
    code = main([
        "eval", "--ckpt", str(run / "ckpt_final"), "--data", str(cli_workspace["data"]),
        "--n", "2", "--steps", "2", "--seed", "1", "--out", str(out),
    ])
    assert code == 0
    report = (out / "eval_report.txt").read_text()
    assert "ssim=" in report and "pixel_accuracy=" in report and "miou=" in report
    assert (out / "eval_samples.csv").read_text().count("\n") == 3  # header + 2 rows


def test_eval_oversized_request(cli_workspace, tmp_path):
    run = cli_workspace["run"]
    code = main([
        "eval", "--ckpt", str(run / "ckpt_final"), "--data", str(cli_workspace["data"]),
        "--n", "50", "--steps", "2", "--out", str(tmp_path / "e"),
    ])
    assert code == 3


def test_inspect_full_profile(capsys):
    assert main(["inspect", "--preset", "paper-profile"]) == 0
    out = capsys.readouterr().out
    count = int(next(line for line in out.splitlines() if line.startswith("parameters:")).split()[1])
    assert 1.33e9 <= count <= 1.36e9


def test_inspect_checkpoint(cli_workspace, capsys):
    run = cli_workspace["run"]
    assert main(["inspect", "--ckpt", str(run / "ckpt_final"), "--tensors"]) == 0
    out = capsys.readouterr().out
    assert "step: 6" in out
    assert "patch_embed.weight" in out


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 64\n")
    with pytest.raises(ConfigError):
        build_settings("toy", bad)
    worse = tmp_path / "worse.ini"
    worse.write_text("[network]\nhidden = 64\n")
    with pytest.raises(ConfigError):
        load_ini(worse)


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        build_settings("huge")


def test_effective_ini_roundtrip(tmp_path):
    settings = build_settings("toy")
    path = tmp_path / "effective.ini"
    write_effective_ini(path, settings)
    reparsed = build_settings(None, path)
    assert reparsed.model == settings.model
    assert reparsed.codec == settings.codec
    assert reparsed.train == settings.train
    assert reparsed.sampler == settings.sampler
    assert reparsed.data == settings.data


def test_preset_flag_override():
    settings = build_settings("toy", overrides={"train": {"objective": "rfm", "seed": 9}})
    assert settings.train.objective == "rfm"
    assert settings.train.seed == 9
    assert settings.model.hidden == 128


@pytest.mark.parametrize(
    "name,argv",
    [
        ("main", ["--help"]),
        ("gen-data", ["gen-data", "--help"]),
        ("train", ["train", "--help"]),
        ("sample", ["sample", "--help"]),
        ("eval", ["eval", "--help"]),
        ("inspect", ["inspect", "--help"]),
    ],
)
def test_help_matches_golden(name, argv, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(argv)
    assert exc.value.code == 0
    got = capsys.readouterr().out
    golden = (GOLDEN_DIR / f"help_{name}.txt").read_text()
    assert got == golden
