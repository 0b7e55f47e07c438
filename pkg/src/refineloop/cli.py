"""Command-line entry point: train-diffusion, train-policy, eval, ablate, sweep.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 missing or unreadable
checkpoint, 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .baselines import BaselineKind, diffusion_rl_finetune
from .config import ExperimentConfig, load_config, write_resolved
from .diffusion import TrainingError, make_schedule, train_denoiser
from .environment import Env
from .evaluation import EPISODE_FIELDS, episode_rows, eval_queries, paired_difference, run_episodes, summarize
from .grpo import UpdateMetrics, train_policy
from .numerics import ConfigurationError, RandomSource
from .policy import PolicyParams, init_policy

log = logging.getLogger("refineloop")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 2, 3, 4

METRIC_FIELDS = ["run_id", "stage", "baseline", "step", "reward_mean", "reward_min", "reward_max",
                 "kl", "adv_std", "loss", "clip_frac", "skipped_groups"]

# policy variants: (checkpoint stem, training mode, feedback during training)
VARIANTS = {
    "closed_loop": ("policy_closed_loop", "closed_loop", "on"),
    "feedforward": ("policy_feedforward", "feedforward", "off"),
    "no_feedback": ("policy_no_feedback", "closed_loop", "off"),
}


# ---------------------------------------------------------------------- helpers

def _env(cfg: ExperimentConfig, feedback: str | None = None) -> Env:
    denoiser, schedule, vocab, _ = ck.load_denoiser(cfg.denoiser_path)
    if vocab != cfg.make_vocab():
        raise ConfigurationError("denoiser checkpoint vocabulary does not match the config")
    env_cfg = cfg.env
    if feedback is not None and feedback != env_cfg.feedback:
        env_cfg = type(env_cfg)(**{**env_cfg.__dict__, "feedback": feedback})
    return Env(denoiser, schedule, cfg.dataset, vocab, cfg.reward, env_cfg)


def _policy_path(cfg: ExperimentConfig, variant: str) -> Path:
    return cfg.out_dir / f"{VARIANTS[variant][0]}.json"


def _extra(cfg: ExperimentConfig, variant: str) -> dict:
    return {"variant": variant, "seed": cfg.seed, "reward_kind": cfg.reward.kind,
            "queries": cfg.task.queries}


def _load_variant(cfg: ExperimentConfig, variant: str):
    """Load a policy checkpoint, refusing one trained for a different task."""
    path = ck.require(_policy_path(cfg, variant), f"{variant} policy checkpoint")
    params, vocab, update, adam, extra = ck.load_policy(path)
    for key in ("reward_kind", "queries"):
        want = _extra(cfg, variant)[key]
        if key in extra and extra[key] != want:
            raise ConfigurationError(f"{path} was trained with {key}={extra[key]!r}, config has {want!r}")
    return params, update, adam


def _fresh_policy(cfg: ExperimentConfig, env: Env) -> PolicyParams:
    p = cfg.policy
    return init_policy(env.vocab.size, env.vocab.length, env.T, RandomSource(cfg.seed).split("policy_init"),
                       p.hidden, p.d_emb, p.xhat_scale, p.emb_scale)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- commands

def cmd_train_diffusion(cfg: ExperimentConfig, threads: int = 1) -> int:
    out = cfg.out_dir
    write_resolved(cfg, out, "train-diffusion")
    vocab = cfg.make_vocab()
    s = cfg.schedule
    schedule = make_schedule(s.T, s.beta_min, s.beta_max, s.kind)
    t0 = time.perf_counter()
    params, curve = train_denoiser(cfg.dataset, vocab, schedule, cfg.denoiser,
                                   RandomSource(cfg.seed).split("denoiser"))
    ck.save_denoiser(cfg.denoiser_path, params, schedule, vocab, {"seed": cfg.seed})
    ck.write_csv(out / "denoiser_loss.csv", [{"step": a, "loss": b} for a, b in zip(curve.steps, curve.losses)],
                 ["step", "loss"])
    ck.write_csv(out / "timings_train-diffusion.csv",
                 [{"stage": "train-diffusion", "seconds": time.perf_counter() - t0}], ["stage", "seconds"])
    log.info("denoiser saved to %s (final loss %.5f)", cfg.denoiser_path, curve.losses[-1])
    return EXIT_OK


def train_variant(cfg: ExperimentConfig, variant: str, threads: int = 1, fresh: bool = False) -> Path:
    """Train (or resume) one policy variant; returns its checkpoint path."""
    stem, mode, feedback = VARIANTS[variant]
    env = _env(cfg, feedback)
    pool = cfg.query_pool(env.vocab)
    path = _policy_path(cfg, variant)
    metrics_path = cfg.out_dir / f"metrics_{stem}.csv"
    timing_path = cfg.out_dir / f"timings_{stem}.csv"
    start, adam = 0, None
    if path.exists() and not fresh:
        params, start, adam = _load_variant(cfg, variant)
        ck.truncate_csv(metrics_path, start)
        ck.truncate_csv(timing_path, start)
        log.info("resuming %s at update %d", variant, start)
    else:
        params = _fresh_policy(cfg, env)
        for p in (metrics_path, timing_path):
            p.unlink(missing_ok=True)
    reference = _fresh_policy(cfg, env) if cfg.grpo.kl_anchor == "reference" else None
    t_last = time.perf_counter()

    def on_update(m: UpdateMetrics, params: PolicyParams, adam) -> None:
        nonlocal t_last
        row = {"run_id": f"{stem}-seed{cfg.seed}", "stage": "train-policy", "baseline": variant,
               "step": m.update, "reward_mean": m.reward_mean, "reward_min": m.reward_min,
               "reward_max": m.reward_max, "kl": m.kl, "adv_std": m.adv_std, "loss": m.loss,
               "skipped_groups": m.skipped_groups}
        ck.append_csv(metrics_path, row, METRIC_FIELDS)
        now = time.perf_counter()
        ck.append_csv(timing_path, {"step": m.update, "seconds": now - t_last}, ["step", "seconds"])
        t_last = now
        done = m.update + 1
        if done % cfg.task.checkpoint_every == 0 or done == cfg.grpo.updates:
            ck.save_policy(path, params, env.vocab, done, adam, _extra(cfg, variant))

    try:
        train_policy(env, params, pool, cfg.grpo, RandomSource(cfg.seed).split(("policy", variant)),
                     mode=mode, start_update=start, adam=adam, threads=threads, on_update=on_update,
                     reference=reference)
    except FloatingPointError:
        ck.save_policy(cfg.out_dir / f"{stem}_diverged.json", params, env.vocab, start, adam,
                       {**_extra(cfg, variant), "diverged": True})
        raise
    if not path.exists():  # zero updates requested
        ck.save_policy(path, params, env.vocab, start, adam, _extra(cfg, variant))
    return path


def cmd_train_policy(cfg: ExperimentConfig, threads: int = 1, mode: str | None = None,
                     fresh: bool = False) -> int:
    mode = mode or cfg.task.train_mode
    write_resolved(cfg, cfg.out_dir, "train-policy")
    ck.require(cfg.denoiser_path, "denoiser checkpoint")
    if mode == BaselineKind.DIFFUSION_RL.value:
        return _train_diffusion_rl(cfg, threads)
    if mode not in VARIANTS:
        raise ConfigurationError(f"--mode for train-policy must be one of {sorted(VARIANTS)} or diffusion_rl")
    train_variant(cfg, mode, threads, fresh)
    return EXIT_OK


def _train_diffusion_rl(cfg: ExperimentConfig, threads: int) -> int:
    env = _env(cfg)
    pool = cfg.query_pool(env.vocab)
    metrics_path = cfg.out_dir / "metrics_diffusion_rl.csv"
    metrics_path.unlink(missing_ok=True)

    def on_update(m) -> None:
        ck.append_csv(metrics_path, {"run_id": f"diffusion_rl-seed{cfg.seed}", "stage": "train-policy",
                                     "baseline": BaselineKind.DIFFUSION_RL.value, "step": m.update,
                                     "reward_mean": m.reward_mean, "loss": m.loss,
                                     "clip_frac": m.clip_frac}, METRIC_FIELDS)

    tuned, _ = diffusion_rl_finetune(env, pool, cfg.diffusion_rl, RandomSource(cfg.seed).split("diffusion_rl"),
                                     threads, on_update)
    ck.save_denoiser(cfg.out_dir / "denoiser_diffusion_rl.json", tuned, env.schedule, env.vocab,
                     {"seed": cfg.seed, "baseline": BaselineKind.DIFFUSION_RL.value})
    return EXIT_OK


def _load_eval_policy(cfg: ExperimentConfig, mode: str) -> PolicyParams | None:
    if mode in ("identity", BaselineKind.DIFFUSION_RL.value):
        return None
    variant = {"feedforward": "feedforward", "no_feedback": "no_feedback"}.get(mode, "closed_loop")
    return _load_variant(cfg, variant)[0]


def evaluate_mode(cfg: ExperimentConfig, mode: str, n_refine: int | None, episodes: int,
                  threads: int = 1, tag: str | None = None) -> tuple[dict, list]:
    """Run one evaluation and write its summary JSON, per-episode CSV and JSON lines."""
    env = _env(cfg)
    policy = _load_eval_policy(cfg, mode)
    run_mode = mode
    if mode == BaselineKind.DIFFUSION_RL.value:
        tuned, _, _, _ = ck.load_denoiser(ck.require(cfg.out_dir / "denoiser_diffusion_rl.json",
                                                     "diffusion-RL checkpoint"))
        env = Env(tuned, env.schedule, env.dataset, env.vocab, env.reward, env.config)
        run_mode = "identity"
    n_refine = n_refine or cfg.env.n_refine_infer
    queries = eval_queries(cfg.query_pool(env.vocab), episodes)
    recs = run_episodes(env, policy, queries, RandomSource(cfg.seed).split("eval"), run_mode,
                        n_refine, threads)
    for r in recs:
        r.tag = mode
    uses_schedule = mode in ("closed_loop", "precomputed", "no_feedback")
    summary = summarize(recs, mode, n_refine if uses_schedule else None, cfg.eval.bootstrap, cfg.seed)
    stem = tag or (f"{mode}_nr{n_refine}" if uses_schedule else mode)
    d = summary.to_dict()
    d["seed"] = cfg.seed
    d["reward_kind"] = cfg.reward.kind
    _write_json(cfg.out_dir / f"summary_{stem}.json", d)
    ck.write_csv(cfg.out_dir / f"episodes_{stem}.csv", episode_rows(recs, env), EPISODE_FIELDS)
    (cfg.out_dir / f"episodes_{stem}.jsonl").write_text("".join(r.to_json(env.vocab) + "\n" for r in recs))
    return d, recs


def cmd_eval(cfg: ExperimentConfig, threads: int = 1, mode: str | None = None,
             n_refine: int | None = None, episodes: int | None = None) -> int:
    write_resolved(cfg, cfg.out_dir, "eval")
    mode = mode or cfg.eval.mode
    episodes = cfg.eval.episodes if episodes is None else episodes
    d, _ = evaluate_mode(cfg, mode, n_refine or cfg.eval.refine_steps, episodes, threads)
    print(json.dumps({k: d[k] for k in ("mode", "refine_steps", "episodes", "reward_mean", "reward_ci95")}))
    return EXIT_OK


ABLATION_RUNGS = [
    ("base (identity)", "identity", None),
    ("+ policy model (untrained)", "untrained", None),
    ("+ GRPO training (feed-forward)", "feedforward", "feedforward"),
    ("+ multiple improvement (no feedback)", "no_feedback", "no_feedback"),
    ("+ visual feedback (closed loop)", "closed_loop", "closed_loop"),
]


def cmd_ablate(cfg: ExperimentConfig, threads: int = 1, episodes: int | None = None) -> int:
    """Incremental ladder; every rung runs on identical seeds and episode counts."""
    write_resolved(cfg, cfg.out_dir, "ablate")
    episodes = cfg.eval.episodes if episodes is None else episodes
    env = _env(cfg)
    queries = eval_queries(cfg.query_pool(env.vocab), episodes)
    rows, prev = [], None
    for label, kind, variant in ABLATION_RUNGS:
        if variant is not None and not _policy_path(cfg, variant).exists():
            log.info("training missing rung %s", variant)
            train_variant(cfg, variant, threads)
        rng = RandomSource(cfg.seed).split("eval")
        if kind == "identity":
            recs = run_episodes(env, None, queries, rng, "identity", threads=threads)
        elif kind == "untrained":
            recs = run_episodes(env, _fresh_policy(cfg, env), queries, rng, "feedforward", threads=threads)
        else:
            policy = _load_variant(cfg, variant)[0]
            recs = run_episodes(env, policy, queries, rng, kind, cfg.env.n_refine_infer, threads)
        rewards = np.array([r.reward for r in recs])
        s = summarize(recs, kind, None, cfg.eval.bootstrap, cfg.seed)
        diff, dci = paired_difference(rewards, prev, cfg.eval.bootstrap, cfg.seed) if prev is not None \
            else (None, None)
        rows.append({"rung": label, "kind": kind, "episodes": episodes, "reward_mean": s.reward_mean,
                     "ci_low": s.reward_ci95[0] if s.reward_ci95 else None,
                     "ci_high": s.reward_ci95[1] if s.reward_ci95 else None,
                     "delta_vs_previous": diff, "delta_ci_low": dci[0] if dci else None,
                     "delta_ci_high": dci[1] if dci else None})
        prev = rewards
    ck.write_csv(cfg.out_dir / "ablation.csv", rows, list(rows[0]))
    for r in rows:
        print(f"{r['rung']:<40} {r['reward_mean']}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, threads: int = 1, mode: str | None = None,
              episodes: int | None = None) -> int:
    write_resolved(cfg, cfg.out_dir, "sweep")
    mode = mode or "closed_loop"
    episodes = cfg.eval.episodes if episodes is None else episodes
    rows = []
    for n in cfg.eval.sweep:
        d, _ = evaluate_mode(cfg, mode, n, episodes, threads, tag=f"sweep_{mode}_nr{n}")
        ci = d["reward_ci95"] or [None, None]
        rows.append({"refine_steps": n, "reward_mean": d["reward_mean"], "ci_low": ci[0], "ci_high": ci[1]})
    ck.write_csv(cfg.out_dir / f"sweep_{mode}.csv", rows, ["refine_steps", "reward_mean", "ci_low", "ci_high"])
    for r in rows:
        print(f"N_R={r['refine_steps']}: {r['reward_mean']}")
    return EXIT_OK


# ------------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for rollouts")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. grpo.updates=10 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="refineloop", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train-diffusion", parents=[common], help="fit the toy denoiser")
    tp = sub.add_parser("train-policy", parents=[common], help="GRPO-train a refinement policy")
    tp.add_argument("--mode", choices=[*VARIANTS, BaselineKind.DIFFUSION_RL.value])
    tp.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate one mode")
    ev.add_argument("--mode", choices=["closed_loop", "precomputed", "identity", "feedforward",
                                       "no_feedback", BaselineKind.DIFFUSION_RL.value])
    ev.add_argument("--refine-steps", type=int)
    ev.add_argument("--episodes", type=int)
    ab = sub.add_parser("ablate", parents=[common], help="incremental ablation ladder")
    ab.add_argument("--episodes", type=int)
    sw = sub.add_parser("sweep", parents=[common], help="evaluate over refinement counts")
    sw.add_argument("--mode", choices=["closed_loop", "precomputed", "no_feedback"])
    sw.add_argument("--episodes", type=int)
    return ap


def _overrides(args) -> dict:
    import yaml
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out"] = args.out
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = load_config(args.config, _overrides(args))
        if args.command == "train-diffusion":
            return cmd_train_diffusion(cfg, args.threads)
        if args.command == "train-policy":
            return cmd_train_policy(cfg, args.threads, args.mode, args.fresh)
        if args.command == "eval":
            return cmd_eval(cfg, args.threads, args.mode, args.refine_steps, args.episodes)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.threads, args.episodes)
        return cmd_sweep(cfg, args.threads, args.mode, args.episodes)
    except ck.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
