import json
import os

import pytest
import yaml

from d2g import cli, config
from d2g.errors import ConfigError
from d2g.pairgen import read_shard, read_shards

TINY = ["data.train_images=96", "data.heldout_images=64", "codec.steps=5", "codec.width=8",
        "teacher.steps=5", "teacher.base_channels=8", "teacher.channel_mults=[1,2]", "teacher.emb_dim=16",
        "pairs.count=64", "pairs.steps=2", "pairs.shard_size=64", "pairs.verify=4",
        "perceptual.widths=[4,6,6,8,8]", "perceptual.backbone_steps=5", "perceptual.triplets=40",
        "perceptual.calibration_steps=5", "perceptual.reconstruct_iters=3", "perceptual.reconstruct_targets=2",
        "perceptual.bench_batch=4", "distill.batch_size=8", "distill.stage1_steps=3", "distill.stage2_steps=2",
        "distill.probe_size=8", "adversarial.r1_interval=2", "eval.samples=64", "eval.diversity_n=2",
        "eval.fidelity_n=4", "eval.steps=2"]


# ------------------------------------------------------------------ config

def test_minimal_config_fills_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\ndistill:\n  lambda_gan: 0.5\n")
    cfg = config.parse_config(p)
    assert cfg.seed == 3 and cfg.distill.lambda_gan == 0.5
    assert cfg.teacher == config.ExperimentConfig().teacher


def test_all_violations_reported(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("distill:\n  lambda_gan: -1\n  bogus: 2\nteacher:\n  steps: -5\nwhat: 1\n")
    with pytest.raises(ConfigError) as info:
        config.parse_config(p)
    keys = {k for k, _ in info.value.violations}
    assert {"distill.lambda_gan", "distill.bogus", "teacher.steps", "what"} <= keys


def test_missing_file():
    with pytest.raises(ConfigError):
        config.parse_config("/nonexistent/c.yaml")


@pytest.mark.parametrize("name", config.PRESETS)
def test_round_trip(tmp_path, name):
    cfg = config.preset(name)
    path = config.write_config(cfg, tmp_path / "c.yaml")
    assert config.parse_config(path) == cfg


def test_overrides():
    cfg = config.apply_overrides(config.ExperimentConfig(), ["distill.lr=0.01", "teacher.channel_mults=[1,2]"])
    assert cfg.distill.lr == 0.01 and cfg.teacher.channel_mults == [1, 2]
    with pytest.raises(ConfigError):
        config.apply_overrides(cfg, ["nosuch.key=1"])


def test_digest_tracks_sections():
    a = config.ExperimentConfig()
    b = config.apply_overrides(a, ["distill.lr=0.5"])
    assert a.digest("teacher") == b.digest("teacher") and a.digest("distill") != b.digest("distill")


# --------------------------------------------------------------------- CLI

def _run(*argv):
    return cli.main(list(argv))


def test_eval_without_generator_is_dependency_error(tmp_path, capsys):
    assert _run("eval", "--out", str(tmp_path)) == cli.EXIT_DEPENDENCY
    assert "--generator" in capsys.readouterr().err
    assert _run("eval", "--out", str(tmp_path), "--generator", str(tmp_path / "none.gen")) == cli.EXIT_DEPENDENCY


def test_config_error_exit(tmp_path, capsys):
    assert _run("eval", "--out", str(tmp_path), "distill.lambda_gan=-1") == cli.EXIT_CONFIG
    assert "distill.lambda_gan" in capsys.readouterr().err


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d = {k: str(root / k) for k in ("codec", "teacher", "pairs", "perc", "distill", "eval", "bench", "rec")}
    common = ["--deterministic", *TINY]
    assert _run("train-codec", "--out", d["codec"], *common) == 0
    codec = os.path.join(d["codec"], "codec.cdc")
    assert _run("train-teacher", "--codec", codec, "--out", d["teacher"], *common) == 0
    teacher = os.path.join(d["teacher"], "teacher.tch")
    assert _run("gen-pairs", "--teacher", teacher, "--count", "64", "--steps", "2", "--cfg", "1.5", "--seed", "4",
                "--out", d["pairs"], "--verify", *common) == 0
    assert _run("train-perceptual", "--codec", codec, "--out", d["perc"], *common) == 0
    assert _run("distill", "--stage", "both", "--pairs", d["pairs"], "--teacher", teacher, "--perceptual", d["perc"],
                "--out", d["distill"], *common) == 0
    gen = os.path.join(d["distill"], "generator-ema.gen")
    assert _run("eval", "--generator", gen, "--teacher", teacher, "--codec", codec, "--perceptual", d["perc"],
                "--out", d["eval"], *common) == 0
    assert _run("bench-loss", "--codec", codec, "--perceptual", d["perc"], "--out", d["bench"], *common,
                "perceptual.bench_trials=20") == 0
    assert _run("reconstruct", "--codec", codec, "--perceptual", d["perc"], "--out", d["rec"], *common) == 0
    d.update(codec_file=codec, teacher_file=teacher, gen_file=gen)
    return d


def test_chain_artifacts(chain):
    for key in ("codec", "teacher", "pairs", "perc", "distill", "eval", "bench", "rec"):
        resolved = yaml.safe_load(open(os.path.join(chain[key], "config.yaml")))
        assert resolved["deterministic"] is True and resolved["pairs"]["count"] == 64
    shard = read_shards(chain["pairs"])[0]
    assert len(shard) == 64 and shard.steps == 2 and shard.guidance == 1.5
    metrics = json.load(open(os.path.join(chain["eval"], "metrics.json")))
    assert {"frechet", "precision", "recall", "alignment", "diversity", "trajectory_fidelity"} <= set(metrics)
    assert os.path.exists(os.path.join(chain["eval"], "samples.ppm"))
    bench = [json.loads(l) for l in open(os.path.join(chain["bench"], "bench.jsonl"))]
    assert {b["path"] for b in bench} == {"pixel", "latent"}
    log = [json.loads(l) for l in open(os.path.join(chain["distill"], "train-stage2.jsonl"))]
    assert len(log) == 2 and "r1" in log[0]


def test_eval_rerun_identical(chain, tmp_path):
    out = str(tmp_path / "again")
    assert _run("eval", "--generator", chain["gen_file"], "--teacher", chain["teacher_file"], "--codec",
                chain["codec_file"], "--perceptual", chain["perc"], "--out", out, "--deterministic", *TINY) == 0
    assert open(os.path.join(out, "metrics.json")).read() == open(os.path.join(chain["eval"], "metrics.json")).read()


def test_rewire_command(chain, tmp_path):
    src = sorted(os.listdir(chain["pairs"]))
    src = os.path.join(chain["pairs"], [f for f in src if f.endswith(".d2gp")][0])
    out = str(tmp_path / "rw.d2gp")
    assert _run("rewire", "--in", src, "--seed", "3", "--out", out) == 0
    assert read_shard(out).rewired
    assert _run("rewire", "--in", str(tmp_path / "missing.d2gp"), "--seed", "3", "--out", out) == cli.EXIT_DEPENDENCY


def test_pipeline_command_is_deterministic(tmp_path):
    reports = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert _run("pipeline", "--out", out, "--deterministic", *TINY) == 0
        reports.append(open(os.path.join(out, "eval", "metrics.json")).read())
    assert reports[0] == reports[1]
