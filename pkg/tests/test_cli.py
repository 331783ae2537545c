"""Command-line surface: config resolution, files written and exit codes."""

import hashlib
import logging

import numpy as np
import pytest

from rwae import cli
from rwae.config import RunConfig, dump_run_config, parse_run_config
from rwae.data import GeneratorConfig, generate_dataset, load_dataset, save_dataset
from rwae.errors import InvalidArgumentError
from rwae.metrics import equal_error_rate, read_report
from rwae.training import TrainConfig

TINY_INI = """
[train]
d_c = 2
d_m = 2
feature_dim = 8
hidden_dim = 8
mlp_dim = 8
critic_hidden = 8
batch_size = 16
inner_steps = 2
epochs = 1
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "train.bin"
    save_dataset(generate_dataset(GeneratorConfig(image_size=8, frames=4, n_sequences=64, sizes=(5,), seed=2)), path)
    return path


@pytest.fixture(scope="module")
def tiny_ini(workdir):
    path = workdir / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture(scope="module")
def trained(workdir, dataset, tiny_ini):
    out = workdir / "run"
    code = cli.main(["train", "--config", str(tiny_ini), "--data", str(dataset), "--out-dir", str(out),
                     "--epochs", "2", "--checkpoint-every", "1", "--weak-supervision", "on"])
    assert code == 0
    return out


class TestRunConfig:
    def test_default_round_trip(self):
        rc = RunConfig()
        assert parse_run_config(dump_run_config(rc)) == rc

    def test_preset_round_trip(self):
        rc = parse_run_config("[run]\npreset = mug-gan\ndesk = true\n[train]\nbeta1 = 2.5\n[paths]\ndataset = a.bin\n")
        assert rc.train.mode == "gan" and rc.train.beta1 == 2.5 and rc.train.beta3 == 50.0
        assert rc.train.lr_decoder == 2e-3
        assert parse_run_config(dump_run_config(rc)) == rc

    @pytest.mark.parametrize(
        "text",
        ["[train]\nbeta4 = 1\n", "[extra]\na = 1\n", "[run]\nfoo = 1\n", "[paths]\nmodel = x\n",
         "[generator]\nsizes = a\n", "[run]\npreset = imagenet\n", "[run]\ndesk = maybe\n"],
    )
    def test_rejects_bad_input(self, text):
        with pytest.raises(InvalidArgumentError):
            parse_run_config(text)

    def test_tuple_values(self):
        rc = parse_run_config("[generator]\nshapes = circle, square\nspeed_range = 0.5, 1.5\n[train]\nmilestones = 3\n")
        assert rc.generator.shapes == ("circle", "square")
        assert rc.generator.speed_range == (0.5, 1.5)
        assert rc.train.milestones == (3,)


class TestGenData:
    def test_same_seed_same_file(self, capsys, tmp_path):
        digests = []
        for name in ("a.bin", "b.bin"):
            code, _ = run(capsys, "gen-data", "--count", 30, "--seed", 7, "--size", 8, "--shape-sizes", 3, "--out", tmp_path / name)
            assert code == 0
            digests.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_count_zero_is_usage_error(self, capsys, tmp_path):
        code, _ = run(capsys, "gen-data", "--count", 0, "--out", tmp_path / "x.bin")
        assert code == 2 and not (tmp_path / "x.bin").exists()

    @pytest.mark.parametrize("flags", [["--speed", "0,0"], ["--shapes", "hexagon"], ["--speed", "1,2,3"],
                                       ["--shape-sizes", "20"]])
    def test_invalid_flags(self, capsys, tmp_path, flags):
        code, _ = run(capsys, "gen-data", "--count", 5, "--out", tmp_path / "x.bin", *flags)
        assert code == 2

    def test_bad_flag_type(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen-data", "--count", "many"])
        assert exc.value.code == 2

    def test_summary_matches_recount(self, capsys, tmp_path):
        path = tmp_path / "d.bin"
        code, out = run(capsys, "gen-data", "--count", 90, "--motions", "line,bounce", "--out", path)
        assert code == 0
        ds = load_dataset(path)
        summary = cli.read_summary(cli.summary_path(path))
        for kind, labels, names in (("shape", ds.content, ds.shape_names), ("motion", ds.motion, ds.motion_names)):
            assert summary[kind] == {n: int(np.sum(labels == i)) for i, n in enumerate(names)}
        rc = parse_run_config(out)
        assert rc.generator.motions == ("line", "bounce") and rc.paths["dataset"] == str(path)

    def test_env_seed_fallback(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("RWAE_SEED", "13")
        _, out = run(capsys, "gen-data", "--count", 5, "--out", tmp_path / "e.bin")
        assert parse_run_config(out).generator.seed == 13
        _, out = run(capsys, "gen-data", "--count", 5, "--seed", 4, "--out", tmp_path / "e.bin")
        assert parse_run_config(out).generator.seed == 4
        ini = tmp_path / "s.ini"
        ini.write_text("[generator]\nseed = 21\n")
        _, out = run(capsys, "gen-data", "--config", ini, "--count", 5, "--out", tmp_path / "e.bin")
        assert parse_run_config(out).generator.seed == 21

    def test_bad_env_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("RWAE_SEED", "abc")
        code, _ = run(capsys, "gen-data", "--count", 5, "--out", tmp_path / "e.bin")
        assert code == 2


class TestTrain:
    def test_preset_resolution(self, capsys, tmp_path, dataset, tiny_ini):
        code, out = run(capsys, "train", "--config", tiny_ini, "--data", dataset, "--out-dir", tmp_path,
                        "--mode", "mmd", "--preset", "smmnist-like", "--epochs", 0)
        assert code == 0
        rc = parse_run_config(out)
        assert (rc.train.beta1, rc.train.beta2, rc.preset) == (5.0, 20.0, "smmnist-like")
        # the file's explicit values still apply on top of the preset
        assert rc.train.d_c == 2
        assert parse_run_config(out) == parse_run_config(dump_run_config(rc))

    def test_override_beats_preset(self, capsys, caplog, tmp_path, dataset, tiny_ini):
        with caplog.at_level(logging.INFO):
            code, out = run(capsys, "train", "--config", tiny_ini, "--data", dataset, "--out-dir", tmp_path,
                            "--preset", "smmnist-like", "--beta1", 9, "--epochs", 0)
        assert code == 0 and parse_run_config(out).train.beta1 == 9.0
        assert any("beta1" in r.getMessage() and "9.0" in r.getMessage() for r in caplog.records)

    def test_outputs(self, trained):
        assert (trained / "final.ckpt").exists()
        assert (trained / "epoch_0001.ckpt").exists() and (trained / "epoch_0002.ckpt").exists()
        rows = (trained / "loss_trace.tsv").read_text().strip().split("\n")
        assert rows[0].startswith("step\tepoch") and len(rows) > 2
        rc = parse_run_config((trained / "run_config.ini").read_text())
        assert rc.train.n_actions == 3 and rc.train.beta3 > 0

    def test_resume_reproduces_next_loss(self, capsys, trained, dataset, tmp_path):
        out = tmp_path / "resumed"
        code, _ = run(capsys, "train", "--data", dataset, "--out-dir", out, "--resume", trained / "epoch_0001.ckpt",
                      "--epochs", 2)
        assert code == 0
        full = [r.split("\t") for r in (trained / "loss_trace.tsv").read_text().strip().split("\n")[1:]]
        resumed = [r.split("\t") for r in (out / "loss_trace.tsv").read_text().strip().split("\n")[1:]]
        assert resumed == [r for r in full if r[1] == "1"]

    def test_resume_rejects_changed_hyperparameters(self, capsys, trained, dataset, tmp_path):
        code, _ = run(capsys, "train", "--data", dataset, "--out-dir", tmp_path, "--resume", trained / "final.ckpt",
                      "--beta1", 3)
        assert code == 2

    def test_missing_dataset_is_io_error(self, capsys, tmp_path):
        code, _ = run(capsys, "train", "--data", tmp_path / "nope.bin", "--out-dir", tmp_path)
        assert code == 3

    def test_corrupt_dataset_is_io_error(self, capsys, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"garbage")
        code, _ = run(capsys, "train", "--data", tmp_path / "bad.bin", "--out-dir", tmp_path)
        assert code == 3

    def test_nan_is_numeric_failure(self, capsys, tmp_path, tiny_ini):
        ds = generate_dataset(GeneratorConfig(image_size=8, frames=4, n_sequences=32, sizes=(3,)))
        ds.frames[:] = np.nan
        save_dataset(ds, tmp_path / "nan.bin")
        code, _ = run(capsys, "train", "--config", tiny_ini, "--data", tmp_path / "nan.bin", "--out-dir", tmp_path / "o")
        assert code == 4

    def test_weak_supervision_off(self, capsys, tmp_path, dataset, tiny_ini):
        _, out = run(capsys, "train", "--config", tiny_ini, "--data", dataset, "--out-dir", tmp_path,
                     "--preset", "mug-mmd", "--weak-supervision", "off", "--epochs", 0)
        rc = parse_run_config(out)
        assert rc.train.n_actions == 0 and rc.train.beta3 == 0.0


class TestEval:
    def test_report(self, capsys, trained, dataset, tmp_path):
        scores = tmp_path / "scores.tsv"
        code, out = run(capsys, "eval", "--checkpoint", trained / "final.ckpt", "--data", dataset,
                        "--scores-out", scores)
        assert code == 0
        report = cli.report_path(trained / "final.ckpt")
        recs = {r["metric"]: r for r in read_report(report)}
        assert {"swap_error_pct", "eer_content", "eer_motion", "recon_mse"} <= set(recs)
        assert "action_accuracy" in recs
        first = report.read_bytes()
        code, out2 = run(capsys, "eval", "--checkpoint", trained / "final.ckpt", "--data", dataset)
        assert code == 0 and report.read_bytes() == first and out2 == out

        rows = [line.split("\t") for line in scores.read_text().strip().split("\n")[1:]]
        for feature in ("content", "motion"):
            same = [float(r[2]) for r in rows if r[0] == feature and r[1] == "same"]
            diff = [float(r[2]) for r in rows if r[0] == feature and r[1] == "diff"]
            assert recs[f"eer_{feature}"]["value"] == equal_error_rate(same, diff)

    def test_classifier_gate_failure(self, capsys, trained, dataset, tmp_path):
        # a classifier fitted on blank frames cannot pass the accuracy gate
        blank = generate_dataset(GeneratorConfig(image_size=8, frames=4, n_sequences=16, sizes=(3,), seed=9))
        blank.frames[:] = 0.0
        save_dataset(blank, tmp_path / "blank.bin")
        code, _ = run(capsys, "eval", "--checkpoint", trained / "final.ckpt", "--data", dataset,
                      "--classifier-data", tmp_path / "blank.bin", "--out", tmp_path / "r.tsv")
        assert code == 2

    def test_missing_checkpoint(self, capsys, dataset, tmp_path):
        code, _ = run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--data", dataset)
        assert code == 3


class TestSwapAndSample:
    def test_self_swap_grid(self, capsys, trained, dataset, tmp_path):
        out = tmp_path / "grid.pgm"
        code, _ = run(capsys, "swap", "--checkpoint", trained / "final.ckpt", "--data", dataset, 3, 3,
                      "--out", out, "--reconstruct-ends")
        assert code == 0
        img = cli.read_pnm(out)
        h = img.shape[0] // 4
        assert img.shape == (4 * 8, 4 * 8)
        assert np.array_equal(img[:h], img[h : 2 * h]) and np.array_equal(img[h : 2 * h], img[2 * h : 3 * h])

    def test_grid_rows_are_inputs(self, capsys, trained, dataset, tmp_path):
        out = tmp_path / "grid.pgm"
        run(capsys, "swap", "--checkpoint", trained / "final.ckpt", "--data", dataset, 1, 2, "--out", out)
        img = cli.read_pnm(out)
        ds = load_dataset(dataset)
        want = np.round(np.concatenate(list(ds.frames[1, :, 0]), axis=1) * 255).astype(np.uint8)
        assert np.array_equal(img[:8], want)

    @pytest.mark.parametrize("i,j", [(0, 64), (-1, 0)])
    def test_index_out_of_range(self, capsys, trained, dataset, tmp_path, i, j):
        code, _ = run(capsys, "swap", "--checkpoint", trained / "final.ckpt", "--data", dataset, i, j,
                      "--out", tmp_path / "g.pgm")
        assert code == 2

    def test_sample_frame_count(self, capsys, trained, tmp_path):
        code, out = run(capsys, "sample", "--checkpoint", trained / "final.ckpt", "--frames", 100, "--count", 2,
                        "--out-dir", tmp_path / "s")
        assert code == 0
        for k in range(2):
            files = sorted((tmp_path / "s" / f"sample_{k:03d}").glob("*.pgm"))
            assert len(files) == 100
            assert cli.read_pnm(files[-1]).shape == (8, 8)
        assert parse_run_config(out).train.n_actions == 3

    def test_sample_deterministic(self, capsys, trained, tmp_path):
        for name in ("a", "b"):
            run(capsys, "sample", "--checkpoint", trained / "final.ckpt", "--frames", 3, "--count", 1,
                "--seed", 5, "--out-dir", tmp_path / name)
        assert (tmp_path / "a/sample_000/frame_0002.pgm").read_bytes() == (tmp_path / "b/sample_000/frame_0002.pgm").read_bytes()


class TestImages:
    def test_pnm_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        cli.write_pnm(tmp_path / "a.pgm", img)
        assert np.array_equal(cli.read_pnm(tmp_path / "a.pgm"), np.round(img * 255).astype(np.uint8))

    def test_nonfinite_rejected(self, tmp_path):
        with pytest.raises(Exception):
            cli.write_pnm(tmp_path / "a.pgm", np.full((2, 2), np.nan))
