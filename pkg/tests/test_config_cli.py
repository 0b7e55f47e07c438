import json

import pytest
import yaml

from refineloop import checkpoint as ck
from refineloop.cli import main
from refineloop.config import ExperimentConfig, load_config
from refineloop.numerics import ConfigurationError

TINY = {
    "schedule": {"T": 10},
    "denoiser": {"steps": 200, "batch_size": 64, "hidden": [16, 16], "log_every": 100},
    "policy": {"hidden": [16]},
    "grpo": {"updates": 4, "queries_per_batch": 2, "group_size": 4},
    "env": {"n_refine_infer": 3},
    "task": {"checkpoint_every": 2},
    "eval": {"episodes": 70, "bootstrap": 200, "sweep": [1, 3]},
    "diffusion_rl": {"updates": 2, "group_size": 4, "groups_per_update": 2},
}


def _config(tmp_path, **extra):
    data = {**TINY, **extra}
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


# -------------------------------------------------------------------- config

def test_defaults():
    cfg = load_config(None)
    assert cfg == ExperimentConfig()
    assert cfg.schedule.T == 50 and cfg.grpo.group_size == 8 and cfg.env.n_refine_train == 2
    assert cfg.grpo.kl_coef == 0.005 and cfg.grpo.clip_eps == 0.2


def test_unknown_key_is_named(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("grpo:\n  group_sise: 4\n")
    with pytest.raises(ConfigurationError, match=r"grpo\.group_sise"):
        load_config(p)


def test_bad_type_is_named():
    with pytest.raises(ConfigurationError, match=r"grpo\.updates"):
        load_config(None, {"grpo.updates": "many"})


def test_rejected_value_names_section():
    with pytest.raises(ConfigurationError, match="grpo"):
        load_config(None, {"grpo.group_size": 1})


def test_yaml_parse_error(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("grpo: [unclosed\n")
    with pytest.raises(ConfigurationError, match="YAML"):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_refinements_bounded_by_horizon():
    with pytest.raises(ConfigurationError, match="exceeds"):
        load_config(None, {"schedule.T": 4, "env.n_refine_infer": 5})


def test_composite_disables_kl_by_default():
    assert load_config(None, {"reward.kind": "composite"}).grpo.kl_coef == 0.0
    assert load_config(None, {"reward.kind": "composite", "grpo.kl_coef": 0.01}).grpo.kl_coef == 0.01


def test_yaml_on_off_strings():
    assert load_config(None, {"env.feedback": False}).env.feedback == "off"


def test_query_pool_follows_reward():
    cfg = load_config(None, {"reward.kind": "ambiguous_nearest"})
    vocab = cfg.make_vocab()
    assert cfg.query_pool(vocab) == [vocab.ambiguous_query(i) for i in range(4)]
    assert load_config(None).query_pool(vocab) == [vocab.mode_query(k) for k in range(8)]


# ----------------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    out = root / "run"
    assert main(["train-diffusion", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_train_diffusion_outputs(trained):
    _, out = trained
    assert (out / "denoiser.json").exists() and (out / "resolved_train-diffusion.yaml").exists()
    assert [r["step"] for r in ck.read_csv(out / "denoiser_loss.csv")] == ["0", "100", "200"]


def test_missing_denoiser_exit_code(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train-policy", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 3
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 3


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["eval", "--set", "grpo.bogus=1", "--out", str(tmp_path)]) == 2
    assert "grpo.bogus" in capsys.readouterr().err
    assert main(["eval", "--threads", "0", "--out", str(tmp_path)]) == 2


def _args(cfg, out, *rest):
    return ["--config", str(cfg), "--out", str(out), "--set", f"denoiser_checkpoint={out}/denoiser.json", *rest]


def test_policy_train_eval_cycle(trained, tmp_path):
    cfg, den = trained
    out = tmp_path / "run"
    out.mkdir()
    (out / "denoiser.json").write_bytes((den / "denoiser.json").read_bytes())
    assert main(["train-policy", *_args(cfg, out)]) == 0
    rows = ck.read_csv(out / "metrics_policy_closed_loop.csv")
    assert [r["step"] for r in rows] == ["0", "1", "2", "3"]
    assert main(["eval", *_args(cfg, out, "--mode", "closed_loop")]) == 0
    s = json.loads((out / "summary_closed_loop_nr3.json").read_text())
    assert s["episodes"] == 70 and s["policy_calls_mean"] == 3
    assert main(["eval", *_args(cfg, out, "--mode", "precomputed")]) == 0
    s = json.loads((out / "summary_precomputed_nr3.json").read_text())
    assert s["policy_calls_mean"] == 0
    assert len(ck.read_csv(out / "episodes_precomputed_nr3.csv")) == 70
    assert main(["eval", *_args(cfg, out, "--mode", "identity", "--episodes", "0")]) == 0
    s = json.loads((out / "summary_identity.json").read_text())
    assert s["reward_mean"] is None and s["reward_ci95"] is None
    assert main(["sweep", *_args(cfg, out)]) == 0
    assert len(ck.read_csv(out / "sweep_closed_loop.csv")) == 2


def test_wrong_reward_checkpoint_rejected(trained, tmp_path):
    cfg, den = trained
    out = tmp_path / "run"
    out.mkdir()
    (out / "denoiser.json").write_bytes((den / "denoiser.json").read_bytes())
    assert main(["train-policy", *_args(cfg, out, "--set", "grpo.updates=1")]) == 0
    assert main(["eval", *_args(cfg, out, "--set", "reward.kind=ambiguous_nearest")]) == 2


def test_resume_reproduces_uninterrupted(trained, tmp_path):
    cfg, den = trained
    full, part = tmp_path / "full", tmp_path / "part"
    for d in (full, part):
        d.mkdir()
        (d / "denoiser.json").write_bytes((den / "denoiser.json").read_bytes())
    assert main(["train-policy", *_args(cfg, full)]) == 0
    assert main(["train-policy", *_args(cfg, part, "--set", "grpo.updates=2")]) == 0
    assert main(["train-policy", *_args(cfg, part)]) == 0
    assert (full / "metrics_policy_closed_loop.csv").read_bytes() == \
        (part / "metrics_policy_closed_loop.csv").read_bytes()
    a, b = ck.load_policy(full / "policy_closed_loop.json"), ck.load_policy(part / "policy_closed_loop.json")
    assert a[2] == b[2] == 4
    assert all((x == y).all() for x, y in zip(a[0].arrays(), b[0].arrays()))


def test_diffusion_rl_cli(trained, tmp_path):
    cfg, den = trained
    out = tmp_path / "run"
    out.mkdir()
    (out / "denoiser.json").write_bytes((den / "denoiser.json").read_bytes())
    assert main(["train-policy", *_args(cfg, out, "--mode", "diffusion_rl")]) == 0
    assert len(ck.read_csv(out / "metrics_diffusion_rl.csv")) == 2
    assert main(["eval", *_args(cfg, out, "--mode", "diffusion_rl")]) == 0


def test_ablate_cli(trained, tmp_path):
    cfg, den = trained
    out = tmp_path / "run"
    out.mkdir()
    (out / "denoiser.json").write_bytes((den / "denoiser.json").read_bytes())
    assert main(["ablate", *_args(cfg, out, "--set", "grpo.updates=1", "--episodes", "16")]) == 0
    rows = ck.read_csv(out / "ablation.csv")
    assert len(rows) == 5


def test_shipped_configs_load():
    from pathlib import Path
    configs = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert configs
    for path in configs:
        load_config(path)
