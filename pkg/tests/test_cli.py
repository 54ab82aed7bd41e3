import numpy as np
import pytest

from repflownet.cli import main
from repflownet.io import read_flo, write_pgm

FAST = """\
seed = {seed}
data.frames = 4
data.image_size = 16
data.n_train = 8
data.n_test = 8
model.backbone = 4
model.convlstm_hidden = 4
model.tail = 4
flow.layers = {layers}
flow.reduce_channels = 2
flow.n_iters = 3
rgb_stage1.epochs = 1
rgb_stage2.epochs = 1
flow.epochs = 1
fusion.epochs = 1
"""


def _frames(tmp_path, n, shift=0):
    rng = np.random.default_rng(0)
    base = rng.uniform(size=(12, 12))
    paths = []
    for i in range(n):
        p = tmp_path / f"f{i}.pgm"
        write_pgm(p, np.roll(base, i * shift, axis=1))
        paths.append(str(p))
    return paths


def _config(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestFlowCommand:
    def test_identical_frames_zero_flow(self, tmp_path):
        paths = _frames(tmp_path, 2)
        assert main(["flow", *paths, "-o", str(tmp_path / "out")]) == 0
        flo = read_flo(tmp_path / "out" / "flow_0000.flo")
        assert (flo.width, flo.height) == (12, 12)
        assert np.all(flo.flow == 0.0)

    def test_one_file_per_pair_and_ppm(self, tmp_path):
        paths = _frames(tmp_path, 3, shift=1)
        cfg = _config(tmp_path, "output.ppm = true\nflow.n_iters = 5\n")
        assert main(["flow", *paths, "-o", str(tmp_path / "out"), "-c", cfg]) == 0
        names = sorted(p.name for p in (tmp_path / "out").iterdir())
        assert names == ["flow_0000.flo", "flow_0000.ppm", "flow_0001.flo", "flow_0001.ppm"]

    def test_missing_frame(self, tmp_path, capsys):
        paths = _frames(tmp_path, 1)
        missing = str(tmp_path / "nope.pgm")
        assert main(["flow", paths[0], missing, "-o", str(tmp_path / "out")]) == 2
        assert missing in capsys.readouterr().err

    def test_malformed_frame(self, tmp_path):
        paths = _frames(tmp_path, 1)
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P5\n4 4\n255\n\x00")
        assert main(["flow", paths[0], str(bad), "-o", str(tmp_path / "out")]) == 2

    def test_bad_config_key(self, tmp_path, capsys):
        paths = _frames(tmp_path, 2)
        cfg = _config(tmp_path, "flow.iterations = 5\n")
        assert main(["flow", *paths, "-o", str(tmp_path / "out"), "-c", cfg]) == 1
        assert "flow.iterations" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["flow"])
        assert exc.value.code == 1


class TestBenchCommand:
    def test_single_point(self, tmp_path, capsys):
        cfg = _config(tmp_path, "bench.resolutions = 8\nbench.channels = 2\nbench.iters = 2\n")
        assert main(["bench", cfg]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "resolution,channels,iters,median_s,iqr_s"
        assert len(lines) == 2 and lines[1].startswith("8,2,2,")

    def test_iters_grid(self, tmp_path, capsys):
        cfg = _config(tmp_path, "bench.resolutions = 8\nbench.channels = 2\nbench.iters = 1, 2, 3, 4\n")
        assert main(["bench", cfg]) == 0
        assert len(capsys.readouterr().out.strip().split("\n")) == 5

    def test_rejects_few_runs(self, tmp_path):
        cfg = _config(tmp_path, "bench.resolutions = 8\nbench.channels = 2\nbench.iters = 2\nbench.runs = 3\n")
        assert main(["bench", cfg]) == 1


class TestTrainCommand:
    def test_reproducible_and_eval(self, tmp_path, capsys):
        cfg = _config(tmp_path, FAST.format(seed=7, layers=1))
        assert main(["train", cfg, "-o", str(tmp_path / "a")]) == 0
        out_a = capsys.readouterr().out
        assert main(["train", cfg, "-o", str(tmp_path / "b")]) == 0
        out_b = capsys.readouterr().out
        for name in ("metrics.csv", "checkpoint.rfk"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert out_a == out_b
        assert [l.split(",")[0] for l in out_a.strip().split("\n")] == ["stream", "rgb", "flow", "fused"]
        assert main(["eval", cfg, str(tmp_path / "a" / "checkpoint.rfk")]) == 0
        assert capsys.readouterr().out == out_a

    def test_env_seed_changes_result(self, tmp_path, monkeypatch):
        cfg = _config(tmp_path, FAST.format(seed=7, layers=1))
        main(["train", cfg, "-o", str(tmp_path / "a")])
        monkeypatch.setenv("REPFLOW_SEED", "8")
        main(["train", cfg, "-o", str(tmp_path / "b")])
        assert (tmp_path / "a" / "checkpoint.rfk").read_bytes() != (tmp_path / "b" / "checkpoint.rfk").read_bytes()

    def test_missing_seed(self, tmp_path, capsys):
        cfg = _config(tmp_path, FAST.format(seed=7, layers=1).replace("seed = 7\n", ""))
        assert main(["train", cfg, "-o", str(tmp_path / "a")]) == 1
        assert "seed" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["train", str(tmp_path / "none.cfg"), "-o", str(tmp_path / "a")]) == 2

    def test_corrupt_checkpoint(self, tmp_path):
        cfg = _config(tmp_path, FAST.format(seed=7, layers=1))
        bad = tmp_path / "bad.rfk"
        bad.write_bytes(b"RFK1\x01")
        assert main(["eval", cfg, str(bad)]) == 2

    def test_divergence_exit_code(self, tmp_path, capsys):
        # the first Adam step moves weights by about lr, the next forward overflows
        cfg = _config(tmp_path, FAST.format(seed=1, layers=0).replace(
            "rgb_stage1.epochs = 1", "rgb_stage1.epochs = 2\nrgb_stage1.lr = 1e308"))
        assert main(["train", cfg, "-o", str(tmp_path / "a")]) == 3
        assert "numeric" in capsys.readouterr().err
        assert not (tmp_path / "a" / "checkpoint.rfk").exists()


class TestAblateCommand:
    def test_iters_rows(self, tmp_path, capsys):
        cfg = _config(tmp_path, FAST.format(seed=2, layers=1) + "ablate.dimension = n_iters\n")
        assert main(["ablate", cfg]) == 0
        rows = capsys.readouterr().out.strip().split("\n")
        assert rows[0] == "setting,accuracy"
        assert [r.split(",")[0] for r in rows[1:]] == ["10", "20", "30", "50"]

    def test_unknown_dimension(self, tmp_path):
        cfg = _config(tmp_path, FAST.format(seed=2, layers=1) + "ablate.dimension = depth\n")
        assert main(["ablate", cfg]) == 1
