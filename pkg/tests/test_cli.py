import pytest

from pseudorec.cli import main

TINY_FLAGS = ["--train-per-class", "30", "--valid-per-class", "10",
              "--test-per-class", "10", "--max-epochs", "1", "--patience", "1",
              "--num-tasks", "2"]


def run_cli(argv):
    """main() returns an exit code for handled paths; argparse raises
    SystemExit for usage errors.  Normalize both to an int."""
    try:
        return main(argv)
    except SystemExit as e:
        return e.code


def test_run_trains_and_writes_artifacts(tmp_path, capsys):
    code = run_cli(["run", "--profile", "mini", "--condition", "std",
                    "--seed", "5", "--out", str(tmp_path), *TINY_FLAGS])
    assert code == 0
    assert (tmp_path / "std" / "5" / "metrics.csv").exists()
    assert "final average accuracy" in capsys.readouterr().out


def test_unknown_condition_exits_1_and_names_valid_ones(capsys):
    code = run_cli(["run", "--profile", "mini", "--condition", "bogus"])
    assert code == 1
    err = capsys.readouterr().err
    assert "pseudo_rec" in err and "rote_learn" in err


def test_missing_profile_is_a_usage_error(capsys):
    code = run_cli(["run", "--condition", "std"])
    assert code == 1
    assert "profile" in capsys.readouterr().err


def test_unknown_subcommand_exits_1(capsys):
    assert run_cli(["frobnicate"]) == 1


def test_report_without_runs_exits_2(tmp_path, capsys):
    code = run_cli(["report", "--out", str(tmp_path / "empty")])
    assert code == 2


def test_report_after_run_writes_summary(tmp_path, capsys):
    run_cli(["run", "--profile", "mini", "--condition", "std", "--seed", "1",
             "--out", str(tmp_path), *TINY_FLAGS])
    code = run_cli(["report", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "summary.csv").exists()
    assert "std" in capsys.readouterr().out


def test_gen_grid_requires_existing_checkpoint(tmp_path, capsys):
    code = run_cli(["gen-grid", "--checkpoint", str(tmp_path / "no.prcl"),
                    "--to", str(tmp_path / "g.png")])
    assert code == 2


def test_config_file_supplies_defaults_and_flags_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# tiny run\n"
        "profile = mini\n"
        "condition = std\n"
        "seed = 2\n"
        f"out = {tmp_path / 'from_cfg'}\n"
        "train_per_class = 30\n"
        "valid_per_class = 10\n"
        "test_per_class = 10\n"
        "max_epochs = 1\n"
        "patience = 1\n"
        "num_tasks = 2\n"
    )
    assert run_cli(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "from_cfg" / "std" / "2" / "metrics.csv").exists()

    # a flag beats the same key in the file
    assert run_cli(["run", "--config", str(cfg), "--seed", "7"]) == 0
    assert (tmp_path / "from_cfg" / "std" / "7" / "metrics.csv").exists()


def test_malformed_config_line_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("profile mini\n")
    assert run_cli(["run", "--config", str(cfg)]) == 2


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert run_cli(["run", "--config", str(tmp_path / "none.cfg")]) == 2


def test_gradient_self_check_passes():
    assert run_cli(["check"]) == 0


def test_gen_grid_from_a_trained_run(tmp_path, capsys):
    run_cli(["run", "--profile", "mini", "--condition", "pseudo_rec", "--seed", "1",
             "--out", str(tmp_path), *TINY_FLAGS,
             "--gan-epochs", "1", "--gan-rehearsal-size", "256",
             "--pseudo-train-size", "60", "--pseudo-valid-size", "20"])
    ckpt = tmp_path / "pseudo_rec" / "1" / "checkpoints" / "generator.prcl"
    out = tmp_path / "samples.png"
    assert run_cli(["gen-grid", "--checkpoint", str(ckpt), "--profile", "mini",
                    "--count", "16", "--to", str(out)]) == 0
    assert out.exists()
