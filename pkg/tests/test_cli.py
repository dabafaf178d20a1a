import json
import os

import numpy as np
import pytest

from cmreg.cli import EXIT_CONTRACT, EXIT_IO, EXIT_OK, main


SMALL_CONFIG = {
    "network": {"feature_dim": 16, "attn_dim": 16, "edge_widths": [8, 8, 16],
                "k_nn": 4, "views": 2, "resolution": 8, "conv_channels": [3, 4]},
    "n_points": 32,
    "n_shapes": 2,
    "regime": "noisy",
    "steps": 2,
    "batch_size": 2,
    "checkpoint_interval": 0,
}


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


def run(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


class TestSynth:
    def test_writes_sample_and_resolved_config(self, tmp_path, config_path):
        out = str(tmp_path / "out")
        code = run(["--config", config_path, "--out", out, "synth",
                    "--kind", "torus", "--regime", "noisy"])
        assert code == EXIT_OK
        for name in ("source.xyz", "target.xyz", "gt.json", "config.resolved.json"):
            assert os.path.exists(os.path.join(out, name))
        resolved = json.load(open(os.path.join(out, "config.resolved.json")))
        assert resolved["n_points"] == 32

    def test_deterministic_bytes(self, tmp_path, config_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            assert run(["--config", config_path, "--out", out, "synth",
                        "--kind", "cube", "--regime", "partial"]) == EXIT_OK
            outs.append(open(os.path.join(out, "source.xyz"), "rb").read())
        assert outs[0] == outs[1]

    def test_unknown_kind_exits_contract(self, tmp_path, config_path):
        code = run(["--config", config_path, "--out", str(tmp_path / "o"), "synth",
                    "--kind", "klein_bottle", "--regime", "clean"])
        assert code == EXIT_CONTRACT


class TestTrainEvalRegister:
    def test_full_cli_cycle(self, tmp_path, config_path):
        train_out = str(tmp_path / "train")
        assert run(["--config", config_path, "--out", train_out, "train",
                    "--eval-samples", "2"]) == EXIT_OK
        ckpt = os.path.join(train_out, "checkpoint.cmig")
        assert os.path.exists(ckpt)
        assert os.path.exists(os.path.join(train_out, "losses.csv"))
        metrics = open(os.path.join(train_out, "metrics.csv")).read().splitlines()
        assert metrics[0] == "RMSE_R,MAE_R,RMSE_t,MAE_t"

        sample_out = str(tmp_path / "sample")
        assert run(["--config", config_path, "--out", sample_out, "synth",
                    "--kind", "torus", "--regime", "noisy"]) == EXIT_OK
        reg_out = str(tmp_path / "reg")
        code = run(["--config", config_path, "--out", reg_out, "register",
                    os.path.join(sample_out, "source.xyz"),
                    os.path.join(sample_out, "target.xyz"),
                    "--checkpoint", ckpt])
        assert code == EXIT_OK
        tf = json.load(open(os.path.join(reg_out, "transform.json")))
        rot = np.array(tf["rotation"])
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-9)

    def test_eval_deterministic_metrics(self, tmp_path, config_path):
        texts = []
        for name in ("e1", "e2"):
            out = str(tmp_path / name)
            assert run(["--config", config_path, "--out", out, "eval",
                        "--n-samples", "2", "--random-model"]) == EXIT_OK
            texts.append(open(os.path.join(out, "metrics.csv"), "rb").read())
        assert texts[0] == texts[1]

    def test_eval_icp_mode(self, tmp_path, config_path):
        out = str(tmp_path / "icp")
        assert run(["--config", config_path, "--out", out, "eval",
                    "--n-samples", "2", "--icp"]) == EXIT_OK

    def test_register_missing_file_exits_io(self, tmp_path, config_path):
        code = run(["--config", config_path, "--out", str(tmp_path / "x"), "register",
                    "/nonexistent/a.xyz", "/nonexistent/b.xyz"])
        assert code == EXIT_IO


class TestAblate:
    def test_n_iter_axis(self, tmp_path, config_path):
        out = str(tmp_path / "ab")
        code = run(["--config", config_path, "--out", out, "ablate",
                    '{"n_iter": [1, 2]}', "--n-samples", "2"])
        assert code == EXIT_OK
        lines = open(os.path.join(out, "ablation.csv")).read().splitlines()
        assert len(lines) >= 2


class TestGradcheckRender:
    def test_render_debug(self, tmp_path, config_path):
        out = str(tmp_path / "render")
        code = run(["--config", config_path, "--out", out, "render-debug",
                    "--kind", "cube"])
        assert code == EXIT_OK
        pgms = [f for f in os.listdir(out) if f.endswith(".pgm")]
        assert len(pgms) == SMALL_CONFIG["network"]["views"]

    def test_bad_flag_exits_nonzero(self):
        assert run(["synth", "--no-such-flag"]) != EXIT_OK

    def test_unknown_subcommand(self):
        assert run(["transmogrify"]) != EXIT_OK
