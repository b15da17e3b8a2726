"""Command-line parsing, precedence, exit codes, and end-to-end commands."""

import json

import pytest
import torch

from styleadapt import cli, data
from styleadapt.errors import ConfigError
from styleadapt.optim import AdamState
from styleadapt.transform import NetworkSpec, init_params

from conftest import smooth_image

TINY = NetworkSpec(base_channels=4, num_residual_blocks=1)


@pytest.fixture()
def tiny_checkpoint(tmp_path):
    params = init_params(TINY, seed=0)
    ckpt = data.Checkpoint(params=params,
                           optimizer_state=AdamState.zeros_like(params.entries).to_arrays(),
                           iteration=0, config={})
    path = tmp_path / "tiny.ckpt"
    data.save_checkpoint(ckpt, path)
    return path


@pytest.fixture()
def content_png(tmp_path):
    path = tmp_path / "content.png"
    data.save_image(smooth_image(64, 42), path)
    return path


class TestParseConfig:
    def test_meta_train_defaults_match_training_protocol(self, tmp_path):
        cfg = cli.parse_config([
            "meta-train", "--content-dir", str(tmp_path), "--style-dir",
            str(tmp_path), "--vgg-weights", "w", "--out", str(tmp_path)])
        assert cfg.delta == 1e-4
        assert cfg.eta == 1e-3
        assert cfg.inner_steps == 1
        assert cfg.style_batch == 4 and cfg.content_batch == 4
        assert cfg.alpha == 1.0 and cfg.beta == 1e5
        assert cfg.meta_grad == "full"

    def test_flag_overrides_file_overrides_default(self, tmp_path):
        file = tmp_path / "conf.json"
        file.write_text(json.dumps({"T": 1, "eta": 0.5}))
        cfg = cli.parse_config([
            "meta-train", "--config", str(file), "--T", "3",
            "--content-dir", str(tmp_path), "--style-dir", str(tmp_path),
            "--vgg-weights", "w", "--out", str(tmp_path)])
        assert cfg.inner_steps == 3  # flag wins
        assert cfg.eta == 0.5       # file wins over default
        assert cfg.delta == 1e-4    # default

    def test_unknown_file_key_rejected(self, tmp_path):
        file = tmp_path / "conf.json"
        file.write_text(json.dumps({"tarnish": 1}))
        with pytest.raises(ConfigError, match="tarnish"):
            cli.parse_config(["meta-train", "--config", str(file),
                              "--content-dir", str(tmp_path),
                              "--style-dir", str(tmp_path),
                              "--vgg-weights", "w", "--out", str(tmp_path)])

    def test_negative_delta_is_validation_error(self, tmp_path):
        with pytest.raises(ConfigError, match="delta"):
            cli.parse_config([
                "meta-train", "--delta", "-1",
                "--content-dir", str(tmp_path), "--style-dir", str(tmp_path),
                "--vgg-weights", "w", "--out", str(tmp_path)])

    def test_negative_delta_exit_code_2(self, tmp_path):
        code = cli.main(["meta-train", "--delta", "-1",
                         "--content-dir", str(tmp_path),
                         "--style-dir", str(tmp_path),
                         "--vgg-weights", "w", "--out", str(tmp_path)])
        assert code == 2

    def test_missing_required_flags(self):
        with pytest.raises(ConfigError, match="--checkpoint"):
            cli.parse_config(["stylize", "--content", "x.png", "--out", "y.png"])

    def test_interpolate_weight_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="sum to 1"):
            cli.parse_config(["interpolate", "--checkpoint", "a,b",
                              "--weights", "0.3,0.8", "--out", "o"])

    def test_command_specific_step_defaults(self, tmp_path):
        adapt_cfg = cli.parse_config([
            "adapt", "--checkpoint", "c", "--style", "s", "--content-dir",
            str(tmp_path), "--vgg-weights", "w", "--out", "o"])
        assert adapt_cfg.steps == 200 and adapt_cfg.step_size == 1e-3
        opt_cfg = cli.parse_config([
            "optimize", "--style", "s", "--content", "c",
            "--vgg-weights", "w", "--out", "o"])
        assert opt_cfg.steps == 800 and opt_cfg.step_size == 1e-2


class TestCommands:
    def test_stylize_happy_path(self, tmp_path, tiny_checkpoint, content_png):
        out = tmp_path / "styled.png"
        code = cli.main(["stylize", "--checkpoint", str(tiny_checkpoint),
                         "--content", str(content_png), "--out", str(out)])
        assert code == 0
        assert out.exists()
        img = data.read_image(out)
        assert img.shape == (3, 64, 64)

    def test_adapt_missing_style_file_exit_1(self, tmp_path, tiny_checkpoint,
                                             content_png, vgg_archive, capsys):
        missing = tmp_path / "nope.png"
        code = cli.main(["adapt", "--checkpoint", str(tiny_checkpoint),
                         "--style", str(missing),
                         "--content-dir", str(content_png.parent),
                         "--vgg-weights", str(vgg_archive),
                         "--out", str(tmp_path / "a.ckpt"), "--steps", "1"])
        assert code == 1
        assert "nope.png" in capsys.readouterr().err

    def test_adapt_runs_and_writes_trace(self, tmp_path, tiny_checkpoint,
                                         vgg_archive):
        content_dir = tmp_path / "contents"
        content_dir.mkdir()
        for i in range(4):
            data.save_image(smooth_image(64, 60 + i), content_dir / f"c{i}.png")
        style = tmp_path / "style.png"
        data.save_image(smooth_image(64, 71), style)
        out = tmp_path / "adapted.ckpt"
        code = cli.main(["adapt", "--checkpoint", str(tiny_checkpoint),
                         "--style", str(style), "--content-dir", str(content_dir),
                         "--vgg-weights", str(vgg_archive), "--out", str(out),
                         "--steps", "2", "--size", "64", "--content-batch", "2"])
        assert code == 0
        assert data.load_checkpoint(out).iteration == 2
        trace_lines = (tmp_path / "adapted.ckpt.trace").read_text().strip().splitlines()
        assert trace_lines[0].startswith("#")
        assert len(trace_lines) == 3

    def test_interpolate_vertex(self, tmp_path, tiny_checkpoint):
        other = init_params(TINY, seed=9)
        second = tmp_path / "other.ckpt"
        data.save_checkpoint(data.Checkpoint(params=other, optimizer_state={},
                                             iteration=0, config={}), second)
        out = tmp_path / "blend.ckpt"
        code = cli.main(["interpolate",
                         "--checkpoint", f"{tiny_checkpoint},{second}",
                         "--weights", "0,1", "--out", str(out)])
        assert code == 0
        assert data.load_checkpoint(out).params.equal(other)

    def test_video_command(self, tmp_path, tiny_checkpoint, capsys):
        frames = tmp_path / "frames"
        frames.mkdir()
        for k in range(3):
            data.save_image(smooth_image(32, k), frames / f"f{k}.png")
        out = tmp_path / "styled_frames"
        code = cli.main(["video", "--checkpoint", str(tiny_checkpoint),
                         "--content-dir", str(frames), "--out", str(out)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "3"
        assert len(list(out.iterdir())) == 3

    def test_optimize_without_checkpoint(self, tmp_path, vgg_archive, capsys):
        content = tmp_path / "c.png"
        style = tmp_path / "s.png"
        data.save_image(smooth_image(64, 1), content)
        data.save_image(smooth_image(64, 2), style)
        out = tmp_path / "o.png"
        code = cli.main(["optimize", "--content", str(content), "--style",
                         str(style), "--vgg-weights", str(vgg_archive),
                         "--out", str(out), "--steps", "2", "--size", "64"])
        assert code == 0
        assert out.exists()
        assert (tmp_path / "o.png.trace").exists()

    def test_benchmark_report_format(self, tmp_path, tiny_checkpoint,
                                     monkeypatch, capsys):
        monkeypatch.setattr(cli, "BENCHMARK_RUNS", 2)
        monkeypatch.setattr(cli, "BENCHMARK_WARMUP", 1)
        code = cli.main(["benchmark", "--checkpoint", str(tiny_checkpoint)])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "# resolution ms_per_image"
        assert [ln.split()[0] for ln in lines[1:]] == ["256", "512"]
        for ln in lines[1:]:
            assert float(ln.split()[1]) > 0.0

    def test_missing_checkpoint_file_exit_1(self, tmp_path, content_png):
        code = cli.main(["stylize", "--checkpoint", str(tmp_path / "ghost.ckpt"),
                         "--content", str(content_png),
                         "--out", str(tmp_path / "x.png")])
        assert code == 1

    def test_meta_train_end_to_end(self, tmp_path, vgg_archive):
        content_dir = tmp_path / "content"
        style_dir = tmp_path / "styles"
        content_dir.mkdir()
        style_dir.mkdir()
        for i in range(15):
            data.save_image(smooth_image(32, 80 + i), content_dir / f"c{i}.png")
        for i in range(2):
            data.save_image(smooth_image(32, 90 + i), style_dir / f"s{i}.png")
        out = tmp_path / "run"
        conf = tmp_path / "desk.json"
        conf.write_text(json.dumps({"base_channels": 4, "num_residual_blocks": 1,
                                    "size": 32, "style_batch": 2,
                                    "content_batch": 2, "iterations": 2,
                                    "checkpoint_interval": 1}))
        code = cli.main(["meta-train", "--config", str(conf),
                         "--content-dir", str(content_dir),
                         "--style-dir", str(style_dir),
                         "--vgg-weights", str(vgg_archive), "--out", str(out)])
        assert code == 0
        ckpts = sorted(p.name for p in out.glob("*.ckpt"))
        assert ckpts == ["iter_000000.ckpt", "iter_000001.ckpt", "iter_000002.ckpt"]
        # 90/10 split with no --val-dir is recorded in the config snapshot
        snap = data.load_checkpoint(out / "iter_000002.ckpt").config
        assert snap["content_split"]["mode"] == "seeded_split"
        lines = (out / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert set(record) == {"iteration", "outer_loss",
                               "per_style_inner_losses", "grad_norm", "wall_time"}
