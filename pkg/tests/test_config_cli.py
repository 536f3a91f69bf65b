import csv
import json
import textwrap

import pytest

from advpolicies.cli import EXIT_CONFIG, EXIT_OK, main
from advpolicies.config import ExperimentConfig, RunManifest, load_config, parse_config
from advpolicies.envs import EnvConfig
from advpolicies.errors import ConfigurationError

TINY = textwrap.dedent("""\
    version: 1
    seed: 3
    env:
      name: CorridorPass
      pose_dim: 2
    victim_ppo:
      total_steps: 1024
      batch_size: 256
      n_envs: 8
      minibatches: 2
      epochs_per_update: 1
    adversary_ppo:
      total_steps: 512
      batch_size: 256
      n_envs: 8
      minibatches: 2
      epochs_per_update: 1
    selfplay:
      pool_interval: 512
    adversary:
      checkpoints: 2
    evaluation:
      n_episodes: 20
    analysis:
      n_steps: 300
      k_list: [1, 2]
      tsne_rows_per_opponent: 20
      tsne_iters: 30
      max_iters: 20
    sweep:
      pose_dims: [0, 2]
      seeds: [0]
""")


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out.strip().splitlines()[-1] if out.out.strip() else "", out.err


def test_defaults_and_round_trip(tmp_path):
    cfg = parse_config("env: {name: DiskSumo}\n")
    assert cfg.env == EnvConfig(env_name="DiskSumo")
    assert cfg.evaluation.n_episodes == 1000
    assert cfg.sweep.pose_dims == (2, 8, 24)
    again = load_config(cfg.dump(tmp_path / "c.yaml"))
    assert again == cfg
    assert again.digest() == cfg.digest()
    assert parse_config("env: {name: DiskSumo}\nseed: 1\n").digest() != cfg.digest()


def test_missing_env_name_names_the_key():
    with pytest.raises(ConfigurationError, match="env.name"):
        parse_config("seed: 1\nenv:\n  pose_dim: 2\n")


@pytest.mark.parametrize("text, key, line", [
    ("env: {name: CorridorPass}\nbogus: 1\n", "bogus", 2),
    ("env:\n  name: CorridorPass\n  posedim: 3\n", "env.posedim", 3),
    ("env: {name: CorridorPass}\nvictim_ppo:\n  batch: 4\n", "victim_ppo.batch", 3),
    ("env: {name: CorridorPass}\nanalysis:\n  k_list: [5]\n  nsteps: 4\n", "analysis.nsteps", 4),
])
def test_unknown_keys_report_their_line(text, key, line):
    with pytest.raises(ConfigurationError) as e:
        parse_config(text, "x.yaml")
    assert f"x.yaml:{line}" in str(e.value)
    assert key in str(e.value)


def test_invalid_values_are_configuration_errors():
    for text in ("env: {name: Pong}\n", "env: {name: CorridorPass, pose_dim: -1}\n",
                 "env: {name: CorridorPass}\nvictim_ppo: {batch_size: 100, minibatches: 3}\n",
                 "env: {name: CorridorPass}\nseed: -4\n", "env: [1, 2\n", "- 1\n"):
        with pytest.raises(ConfigurationError):
            parse_config(text)


def test_overrides_replace_fields():
    cfg = parse_config("env: {name: CorridorPass}\nseed: 1\n", overrides={"seed": 9, "out": None})
    assert cfg.seed == 9 and cfg.out == "results"


def test_missing_config_file_exits_2(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train-victim", "--config", tmp_path / "nope.yaml")
    assert code == EXIT_CONFIG
    assert "not found" in err


def test_missing_checkpoint_exits_2(tiny_config, tmp_path, capsys):
    code, _, err = run_cli(capsys, "evaluate", "--config", tiny_config, "--out", tmp_path,
                           "--victim", tmp_path / "missing.pol")
    assert code == EXIT_CONFIG
    assert "missing.pol" in err


def test_missing_env_name_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nenv:\n  pose_dim: 2\n")
    code, _, err = run_cli(capsys, "train-victim", "--config", bad)
    assert code == EXIT_CONFIG
    assert "env.name" in err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Train a tiny victim and attack it once; shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    assert main(["train-victim", "--config", str(cfg), "--out", str(root / "a"), "--deterministic"]) == EXIT_OK
    victim_dir = root / "a" / "victim-CorridorPass-pose2-seed3"
    assert main(["train-adversary", "--config", str(cfg), "--out", str(root / "a"), "--deterministic",
                 "--victim", str(victim_dir / "runner_final.pol")]) == EXIT_OK
    return root, cfg, victim_dir, root / "a" / "adversary-CorridorPass-pose2-seed3"


def test_train_victim_outputs(pipeline):
    _, _, victim_dir, _ = pipeline
    ckpts = sorted((victim_dir / "checkpoints").glob("runner_step*.pol"))
    assert len(ckpts) >= 2
    for name in ("runner_final.pol", "blocker_final.pol", "metrics_runner.csv", "config.yaml", "manifest.json"):
        assert (victim_dir / name).is_file()
    manifest = RunManifest.read(victim_dir)
    assert manifest.command == "train-victim"
    assert "runner_final.pol" in manifest.artifacts


def test_deterministic_reruns_are_bit_identical(pipeline):
    root, cfg, victim_dir, adv_dir = pipeline
    assert main(["train-victim", "--config", str(cfg), "--out", str(root / "b"), "--deterministic"]) == EXIT_OK
    assert main(["train-adversary", "--config", str(cfg), "--out", str(root / "b"), "--deterministic",
                 "--victim", str(victim_dir / "runner_final.pol")]) == EXIT_OK
    for d in (victim_dir, adv_dir):
        first = RunManifest.read(d).artifacts
        second = RunManifest.read(root / "b" / d.name).artifacts
        assert first == second


def test_adversary_curve_has_one_row_per_checkpoint(pipeline):
    _, _, _, adv_dir = pipeline
    ckpts = sorted((adv_dir / "checkpoints").glob("adversary_step*.pol"))
    rows = list(csv.DictReader((adv_dir / "curve.csv").open()))
    assert len(rows) == len(ckpts) >= 2
    assert [int(r["step"]) for r in rows] == sorted(int(r["step"]) for r in rows)
    assert (adv_dir / "curve.svg").is_file()


def test_resume_continues_step_count(pipeline, tmp_path, capsys):
    _, cfg, victim_dir, adv_dir = pipeline
    last = sorted((adv_dir / "checkpoints").glob("adversary_step*.pol"))[-1]
    code, out, _ = run_cli(capsys, "train-adversary", "--config", cfg, "--out", tmp_path, "--no-plots",
                           "--victim", victim_dir / "runner_final.pol", "--resume", last)
    assert code == EXIT_OK
    steps = [int(p.stem.removeprefix("adversary_step")) for p in sorted((tmp_path / out.split("/")[-1])
                                                                         .glob("checkpoints/*.pol"))]
    assert min(steps) > int(last.stem.removeprefix("adversary_step"))


def test_evaluate_grid(pipeline, tmp_path, capsys):
    _, cfg, victim_dir, adv_dir = pipeline
    adv = sorted((adv_dir / "checkpoints").glob("*.pol"))[-1]
    code, out, _ = run_cli(capsys, "evaluate", "--config", cfg, "--out", tmp_path, "--no-plots",
                           "--victim", f"victim={victim_dir / 'runner_final.pol'}", "--opponent", f"Adv={adv}")
    assert code == EXIT_OK
    run = tmp_path / out.split("/")[-1]
    doc = json.loads((run / "grid.json").read_text())
    assert doc["victims"] == ["victim", "victim-masked"]
    assert doc["opponents"] == ["Adv", "Rand", "Zero"]
    assert len(doc["cells"]) == 6
    assert not (run / "grid.svg").exists()
    code, out, _ = run_cli(capsys, "evaluate", "--config", cfg, "--out", tmp_path / "nm", "--no-masks",
                           "--victim", victim_dir / "runner_final.pol")
    assert code == EXIT_OK
    assert len(list(csv.DictReader((tmp_path / "nm" / out.split("/")[-1] / "grid.csv").open()))) == 2


def test_analyze_bundle(pipeline, tmp_path, capsys):
    _, cfg, victim_dir, adv_dir = pipeline
    adv = sorted((adv_dir / "checkpoints").glob("*.pol"))[-1]
    code, out, _ = run_cli(capsys, "analyze", "--config", cfg, "--out", tmp_path,
                           "--victim", victim_dir / "runner_final.pol",
                           "--normal", f"Normal={victim_dir / 'blocker_final.pol'}", "--opponent", f"Adv={adv}")
    assert code == EXIT_OK
    bundle = tmp_path / out.split("/")[-1] / "report"
    for name in ("likelihood.csv", "gmm_selection.csv", "dispersion.csv", "tsne.csv", "likelihood.svg", "tsne.svg"):
        assert (bundle / name).is_file()
    labels = [r["opponent"] for r in csv.DictReader((bundle / "likelihood.csv").open())]
    assert labels == ["Normal-validation", "Adv", "Rand"]


def test_sweep_command(tiny_config, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "sweep-dim", "--config", tiny_config, "--out", tmp_path, "--no-plots")
    assert code == EXIT_OK
    run = tmp_path / out.split("/")[-1]
    assert len(list(csv.DictReader((run / "sweep.csv").open()))) == 2
    assert len(list(csv.DictReader((run / "sweep_medians.csv").open()))) == 2


def test_out_root_from_environment(tiny_config, tmp_path, capsys, monkeypatch, pipeline):
    _, _, victim_dir, _ = pipeline
    monkeypatch.setenv("ADVPOLICIES_OUT", str(tmp_path / "env-root"))
    code, out, _ = run_cli(capsys, "evaluate", "--config", tiny_config, "--no-plots", "--no-masks",
                           "--victim", victim_dir / "runner_final.pol")
    assert code == EXIT_OK
    assert out.startswith(str(tmp_path / "env-root"))


def test_config_class_defaults_are_sane():
    cfg = ExperimentConfig(EnvConfig())
    assert cfg.adversary_ppo.total_steps <= 0.25 * cfg.victim_ppo.total_steps
