import os

import pytest

import mome.cli as cli
from mome.data import read_manifest, synthesize_cohort
from mome.training import FoldResult, TrainSummary, TrainingAbort


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicohort")
    synthesize_cohort(20, 6, 8, "geno", 0.2, seed=3, out_dir=out, folds=2)
    return out


def run_cli(*argv):
    return cli.main(list(argv))


class TestGenData:
    def test_generates_files_and_prints_manifest(self, tmp_path, capsys):
        code = run_cli(
            "gen-data", "--n", "12", "--patches", "8", "--dim", "6",
            "--signal", "cross", "--seed", "7", "--out", str(tmp_path / "c"),
        )
        assert code == 0
        manifest = capsys.readouterr().out.strip()
        rows = read_manifest(manifest)
        assert len(rows) == 12

    def test_missing_out_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_cli("gen-data", "--n", "12")
        assert exc.value.code == 2
        assert not any("manifest" in name for name in os.listdir(tmp_path))

    def test_rerun_same_flags_identical_bytes(self, tmp_path):
        for tag in ("a", "b"):
            run_cli("gen-data", "--n", "10", "--patches", "4", "--dim", "4",
                    "--seed", "9", "--out", str(tmp_path / tag))
        names = sorted(os.listdir(tmp_path / "a"))
        assert names == sorted(os.listdir(tmp_path / "b"))
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_censor_rate_is_usage_error(self, tmp_path, capsys):
        code = run_cli("gen-data", "--n", "12", "--censor-rate", "0.99",
                       "--out", str(tmp_path / "c"))
        assert code == 2


class TestTrainCommand:
    def test_reporting_shape(self, cohort_dir, tmp_path, capsys):
        code = run_cli(
            "train", "--manifest", str(cohort_dir / "manifest.csv"),
            "--out", str(tmp_path / "run"), "--epochs", "1", "--dim", "8",
            "--bins", "3", "--seed", "4",
        )
        assert code == 0
        out = capsys.readouterr().out
        best_lines = [l for l in out.splitlines() if l.startswith("fold ")]
        summary_lines = [l for l in out.splitlines() if l.startswith("c_index ")]
        assert len(best_lines) == 2  # one per manifest fold
        assert len(summary_lines) == 1
        assert "±" in summary_lines[0]
        metrics = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "fold,epoch,split,loss,c_index,wall_seconds"
        assert len(metrics) == 1 + 2 * 2  # header + (train,val) x folds x epochs

    def test_flags_override_config_file_over_defaults(self, cohort_dir, tmp_path,
                                                      monkeypatch):
        captured = {}

        def fake_train(run, manifest, out_dir, emit=None):
            captured["run"] = run
            return TrainSummary([FoldResult(0, 0, 0.5, "x")], 0.5, 0.0, [])

        monkeypatch.setattr(cli, "train_cohort", fake_train)
        config = tmp_path / "run.cfg"
        config.write_text("epochs=9\nlr=0.5\nnb=7\nexperts=tf,snn\n")
        code = run_cli(
            "train", "--manifest", str(cohort_dir / "manifest.csv"),
            "--out", str(tmp_path / "o"), "--config", str(config), "--epochs", "2",
        )
        assert code == 0
        run = captured["run"]
        assert run.epochs == 2  # flag beats file
        assert run.lr == 0.5  # file beats default
        assert run.n_b == 7  # file key with flag spelling
        assert run.enable_mask == (True, False, True, False)
        assert run.weight_decay == 1e-5  # untouched default

    def test_expert_mask_flag(self, cohort_dir, tmp_path, monkeypatch):
        captured = {}

        def fake_train(run, manifest, out_dir, emit=None):
            captured["run"] = run
            return TrainSummary([FoldResult(0, 0, 0.5, "x")], 0.5, 0.0, [])

        monkeypatch.setattr(cli, "train_cohort", fake_train)
        run_cli("train", "--manifest", str(cohort_dir / "manifest.csv"),
                "--out", str(tmp_path / "o"), "--experts", "tf")
        assert captured["run"].enable_mask == (True, False, False, False)
        run_cli("train", "--manifest", str(cohort_dir / "manifest.csv"),
                "--out", str(tmp_path / "o"), "--nb", "8")
        assert captured["run"].n_b == 8

    def test_mome_seed_env_fallback(self, cohort_dir, tmp_path, monkeypatch):
        captured = {}

        def fake_train(run, manifest, out_dir, emit=None):
            captured["run"] = run
            return TrainSummary([FoldResult(0, 0, 0.5, "x")], 0.5, 0.0, [])

        monkeypatch.setattr(cli, "train_cohort", fake_train)
        monkeypatch.setenv("MOME_SEED", "321")
        run_cli("train", "--manifest", str(cohort_dir / "manifest.csv"),
                "--out", str(tmp_path / "o"))
        assert captured["run"].seed == 321
        run_cli("train", "--manifest", str(cohort_dir / "manifest.csv"),
                "--out", str(tmp_path / "o"), "--seed", "5")
        assert captured["run"].seed == 5

    def test_training_abort_maps_to_exit_one(self, cohort_dir, tmp_path, monkeypatch):
        def exploding(run, manifest, out_dir, emit=None):
            raise TrainingAbort("s0003", ValueError("inf"))

        monkeypatch.setattr(cli, "train_cohort", exploding)
        code = run_cli("train", "--manifest", str(cohort_dir / "manifest.csv"),
                       "--out", str(tmp_path / "o"))
        assert code == 1

    def test_missing_manifest_is_data_error(self, tmp_path):
        code = run_cli("train", "--manifest", str(tmp_path / "none.csv"),
                       "--out", str(tmp_path / "o"))
        assert code == 3


@pytest.fixture(scope="module")
def trained(cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    code = run_cli(
        "train", "--manifest", str(cohort_dir / "manifest.csv"),
        "--out", str(out), "--epochs", "1", "--dim", "8", "--bins", "3",
        "--seed", "6",
    )
    assert code == 0
    return out


class TestEvalAndRouteStats:

    def test_eval_prints_metrics(self, cohort_dir, trained, capsys):
        code = run_cli("eval", "--checkpoint", str(trained / "fold0.ckpt"),
                       "--manifest", str(cohort_dir / "manifest.csv"), "--fold", "0")
        assert code == 0
        out = capsys.readouterr().out
        assert "c_index=" in out and "loss=" in out

    def test_route_stats_histogram(self, cohort_dir, trained, tmp_path, capsys):
        log_path = tmp_path / "routing.csv"
        code = run_cli(
            "route-stats", "--checkpoint", str(trained / "fold0.ckpt"),
            "--manifest", str(cohort_dir / "manifest.csv"),
            "--log-out", str(log_path),
        )
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        header = out[0].split(",")
        assert header[0] == "layer" and len(header) == 5
        for line in out[1:5]:
            counts = [int(v) for v in line.split(",")[1:]]
            assert sum(counts) == 20
        log_lines = log_path.read_text().splitlines()
        assert log_lines[0] == "layer,sample_id,expert,logit0,logit1,logit2,logit3"
        assert len(log_lines) == 1 + 20 * 4

    def test_checkpoint_manifest_mismatch(self, cohort_dir, trained, tmp_path):
        other = tmp_path / "other"
        synthesize_cohort(12, 4, 5, "patho", 0.0, seed=1, out_dir=other)
        code = run_cli("eval", "--checkpoint", str(trained / "fold0.ckpt"),
                       "--manifest", str(other / "manifest.csv"))
        assert code == 3


class TestGradcheckCommand:
    def test_single_component_pass(self, capsys):
        code = run_cli("gradcheck", "--component", "matmul", "--seeds", "3")
        assert code == 0
        assert "PASS" in capsys.readouterr().out

    def test_dropf2_reports_exact_zero(self, capsys):
        code = run_cli("gradcheck", "--component", "dropf2", "--seeds", "3")
        assert code == 0
        out = capsys.readouterr().out
        assert "reference-modality gradient exactly zero" in out

    def test_unknown_component_is_usage_error(self):
        assert run_cli("gradcheck", "--component", "nope") == 2

    def test_injected_fault_detected(self):
        from mome.gradcheck import run_suite

        results = run_suite(components=["softmax"], seeds=2, fault_component="softmax")
        assert not results[0].passed
