"""dtcorl command line: generate | train | eval | verify | belief-bench.

Exit codes: 0 success, 1 usage or config error, 2 runtime abort
(non-finite loss, missing or corrupt inputs), 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import theory
from .bench import run_belief_bench, write_bench_csvs
from .belief import BeliefConfig, BeliefTrainConfig, BeliefTrainer, NonFiniteLoss, build_belief, load_belief, save_belief
from .checkpoint import atomic_write_bytes
from .checkpoint import load as load_arrays
from .checkpoint import save as save_arrays
from .config import ConfigError, ExperimentConfig
from .envs import make_env
from .learner import (LearnerConfig, load_agent, read_trace_csv, save_agent, train_augmented_bc, train_dtcorl,
                      write_trace_csv)
from .rollout import DelayProcess, TrajectorySet, evaluate, file_checksum, generate_behavior_dataset

log = logging.getLogger("dtcorl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OPT_MAGIC = b"DTCO"


class RuntimeAbort(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtcorl", description="Delayed offline RL laboratory")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("generate", "train", "eval", "verify", "belief-bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI-style config file")
        sp.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides run.seeds")
        sp.add_argument("--out", help="output directory; overrides run.out")
        sp.add_argument("--profile", choices=("smoke", "full"), default="full")
        if name == "train":
            sp.add_argument("--resume", action="store_true", help="continue from the checkpoints in --out")
    return p


def load_config(args, env=None) -> ExperimentConfig:
    """Precedence, lowest first: defaults, config file, profile, DTCORL_ variables, flags."""
    cfg = ExperimentConfig.load(args.config, {}) if args.config else ExperimentConfig()
    cfg.apply_profile(args.profile)
    cfg.apply_env(os.environ if env is None else env)
    if args.seed:
        cfg.run.seeds = list(args.seed)
    if args.out:
        cfg.run.out = args.out
    return cfg.validate()


# ---------------------------------------------------------------------------
# file helpers


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _paths(out: str, seed: int) -> dict:
    return {
        "dataset": os.path.join(out, f"dataset_seed{seed}.jsonl"),
        "manifest": os.path.join(out, f"dataset_seed{seed}.manifest.json"),
        "metrics": os.path.join(out, f"metrics_seed{seed}.csv"),
        "policy": os.path.join(out, f"policy_seed{seed}.dtcp"),
        "belief": os.path.join(out, f"belief_seed{seed}.dtcb"),
        "belief_opt": os.path.join(out, f"belief_opt_seed{seed}.dtco"),
    }


def _make_env(cfg):
    try:
        return make_env(cfg.env.id, cfg.env.sigma, cfg.env.horizon)
    except ValueError as exc:
        raise ConfigError(f"env.id: {exc}") from None


def _belief_delay(cfg) -> int:
    return max([cfg.delay.max_delay] + list(cfg.eval.delays))


def _load_dataset(cfg, seed: int) -> TrajectorySet:
    p = _paths(cfg.run.out, seed)
    if not os.path.exists(p["manifest"]) or not os.path.exists(p["dataset"]):
        raise RuntimeAbort(f"no dataset for seed {seed} in {cfg.run.out}; run `dtcorl generate` first")
    with open(p["manifest"]) as fh:
        manifest = json.load(fh)
    got = file_checksum(p["dataset"])
    if got != manifest["checksum"]:
        raise RuntimeAbort(f"manifest checksum mismatch for {p['dataset']}: expected {manifest['checksum']}, "
                           f"found {got}")
    ds = TrajectorySet.load(p["dataset"], manifest)
    if len(ds) == 0:
        raise RuntimeAbort("empty dataset")
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig) -> int:
    env = _make_env(cfg)
    os.makedirs(cfg.run.out, exist_ok=True)
    for seed in cfg.run.seeds:
        full = generate_behavior_dataset(env, cfg.dataset.behavior, cfg.dataset.n_trajectories, seed)
        ds = full.subset(cfg.dataset.fraction, seed) if len(full) else full
        p = _paths(cfg.run.out, seed)
        tmp = p["dataset"] + ".tmp"
        checksum = ds.save(tmp, discrete=getattr(env, "discrete", False))
        os.replace(tmp, p["dataset"])
        manifest = {
            "env": cfg.env.id, "behavior": cfg.dataset.behavior, "K": cfg.dataset.n_trajectories,
            "fraction": cfg.dataset.fraction, "n_selected": len(ds), "seed": seed, "checksum": checksum,
            "file": os.path.basename(p["dataset"]), "mean_return": ds.mean_return() if len(ds) else None,
            "metadata": {"created_unix": time.time()},
        }
        _write_text(p["manifest"], json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        log.info("seed %d: %d trajectories -> %s", seed, len(ds), p["dataset"])
    _write_text(os.path.join(cfg.run.out, "config.ini"), cfg.to_text())
    return EXIT_OK


def _learner_cfg(cfg) -> LearnerConfig:
    ln = cfg.learner
    return LearnerConfig.from_dict({k: getattr(ln, k) for k in vars(ln)})


def _belief_cfgs(cfg, env):
    b = cfg.belief
    bcfg = BeliefConfig(env.state_dim, env.action_dim, _belief_delay(cfg), d_model=b.d_model, n_layers=b.n_layers,
                        n_heads=b.n_heads, dropout=b.dropout, mode=b.mode, n_members=b.n_members, hidden=b.hidden,
                        kind=b.architecture)
    return bcfg, BeliefTrainConfig(lr=b.lr, weight_decay=b.weight_decay, batch_size=b.batch_size)


def _save_belief_opt(trainer, path) -> None:
    st = trainer.opt.state_arrays()
    arrays = {f"m.{i}": m for i, m in enumerate(st["m"])}
    arrays.update({f"v.{i}": v for i, v in enumerate(st["v"])})
    save_arrays(path, OPT_MAGIC, {"t": st["t"], "steps": trainer.steps, "rng": trainer.rng.bit_generator.state},
                arrays)


def _load_belief_opt(trainer, path) -> None:
    meta, arrays = load_arrays(path, OPT_MAGIC)
    n = len(trainer.opt.params)
    trainer.opt.load_state_arrays({"t": meta["t"], "m": [arrays[f"m.{i}"] for i in range(n)],
                                   "v": [arrays[f"v.{i}"] for i in range(n)]})
    trainer.steps = meta["steps"]
    trainer.rng.bit_generator.state = meta["rng"]


def _eval_fn(cfg, env, seed):
    if not cfg.eval.eval_every_epoch:
        return None
    dp = DelayProcess("deterministic", cfg.delay.max_delay)

    def fn(agent, belief):
        r = evaluate(env, agent.policy(), belief, dp, cfg.eval.n_episodes, seeds=(seed,))
        return r.mean, r.std
    return fn


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> int:
    env = _make_env(cfg)
    ln = cfg.learner
    lcfg = _learner_cfg(cfg)
    n_epochs = max(1, ln.n_steps // ln.steps_per_epoch)
    delay = cfg.delay.max_delay
    for seed in cfg.run.seeds:
        ds = _load_dataset(cfg, seed)
        p = _paths(cfg.run.out, seed)
        trace, agent, trainer, done = [], None, None, 0
        if resume and os.path.exists(p["metrics"]) and os.path.exists(p["policy"]):
            trace = read_trace_csv(p["metrics"])
            done = len(trace)
            if [r["epoch"] for r in trace] != list(range(1, done + 1)):
                raise RuntimeAbort(f"{p['metrics']} has non-contiguous epochs")
            agent, _ = load_agent(p["policy"], lcfg)
            if ln.algorithm == "dtcorl" and delay > 0:
                bcfg, btcfg = _belief_cfgs(cfg, env)
                trainer = BeliefTrainer(load_belief(p["belief"], bcfg), btcfg, seed)
                if os.path.exists(p["belief_opt"]):
                    _load_belief_opt(trainer, p["belief_opt"])
            log.info("seed %d: resuming after epoch %d", seed, done)
        remaining = n_epochs - done
        if remaining <= 0:
            log.info("seed %d: already complete (%d epochs)", seed, done)
            continue
        steps = remaining * ln.steps_per_epoch
        ev = _eval_fn(cfg, env, seed)
        if ln.algorithm == "augbc":
            res = train_augmented_bc(ds, env.state_dim, env.action_dim, delay, lcfg, n_steps=steps,
                                     steps_per_epoch=ln.steps_per_epoch, seed=seed, eval_fn=ev, agent=agent,
                                     start_epoch=done)
        else:
            bcfg, btcfg = _belief_cfgs(cfg, env)
            frozen = None
            if trainer is not None and not ln.joint:
                frozen, trainer = trainer.model, None  # separate mode: the belief stays fixed after pretraining
            if trainer is None and frozen is None and delay > 0:
                trainer = BeliefTrainer(build_belief(bcfg, seed), btcfg, seed)
            res = train_dtcorl(ds, env.state_dim, env.action_dim, delay, lcfg, joint=ln.joint, n_steps=steps,
                               steps_per_epoch=ln.steps_per_epoch, seed=seed, belief=frozen, belief_trainer=trainer,
                               eval_fn=ev, agent=agent, start_epoch=done,
                               variable_length=bcfg.max_delay > delay)
            if res.belief is not None and delay > 0:
                save_belief(res.belief, p["belief"])
                if res.belief_trainer is not None:
                    _save_belief_opt(res.belief_trainer, p["belief_opt"])
        save_agent(res.agent, p["policy"], {"seed": seed, "delay": delay})
        write_trace_csv(p["metrics"], trace + res.trace)
        last = res.trace[-1]
        log.info("seed %d: epoch %d critic %.4g actor %.4g belief %.4g", seed, last["epoch"], last["critic_loss"],
                 last["actor_loss"], last["belief_loss"])
    return EXIT_OK


EVAL_HEADER = ["seed", "delay_kind", "max_delay", "mean_delay", "normalized_mean", "normalized_std", "return_mean",
               "n_episodes", "status"]


def cmd_eval(cfg: ExperimentConfig) -> int:
    env = _make_env(cfg)
    rows = []
    for seed in cfg.run.seeds:
        p = _paths(cfg.run.out, seed)
        if not os.path.exists(p["policy"]):
            raise RuntimeAbort(f"no policy checkpoint for seed {seed} in {cfg.run.out}; run `dtcorl train` first")
        agent, meta = load_agent(p["policy"])
        belief = None
        if meta["kind"] == "dtcorl" and os.path.exists(p["belief"]):
            belief = load_belief(p["belief"])
        for d in cfg.eval.delays:
            kinds = ["deterministic"] + (["uniform"] if cfg.eval.stochastic and d >= 1 else [])
            for kind in kinds:
                dp = DelayProcess(kind, d)
                if meta["kind"] == "augbc" and d != meta["delay"]:
                    rows.append([seed, kind, d, dp.expected_mean(), "nan", "nan", "nan", 0,
                                 f"skipped: policy input fixed to delay {meta['delay']}"])
                    continue
                if belief is not None and d > belief.cfg.max_delay:
                    rows.append([seed, kind, d, dp.expected_mean(), "nan", "nan", "nan", 0,
                                 f"skipped: belief max delay {belief.cfg.max_delay}"])
                    continue
                r = evaluate(env, agent.policy(), belief, dp, cfg.eval.n_episodes, seeds=(seed,))
                rows.append([seed, kind, d, dp.expected_mean(), repr(r.mean), repr(float(np.std(r.normalized))),
                             repr(float(np.mean(r.returns))), cfg.eval.n_episodes, "ok"])
    os.makedirs(cfg.run.out, exist_ok=True)
    _write_csv(os.path.join(cfg.run.out, "eval.csv"), EVAL_HEADER, rows)
    for r in rows:
        log.info("seed %s %s(%s): %s", r[0], r[1], r[2], r[4] if r[8] == "ok" else r[8])
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig) -> int:
    v = cfg.verify
    seed = cfg.run.seeds[0]
    if v.n_mdps < 1 or not v.delay_pairs:
        raise ConfigError("nothing to verify: empty instance family")
    reports = theory.run_lemma_suite(v.n_mdps, v.delay_pairs, v.n_policy_pairs, v.n_states, v.n_actions,
                                     v.n_triples, seed, v.fault)
    mono = theory.run_monotone_suite(v.n_mdps, v.monotone_delays, v.monotone_iters, v.monotone_states,
                                     v.monotone_actions, cfg.learner.lam1, seed) if v.monotone_delays else []
    os.makedirs(cfg.run.out, exist_ok=True)
    theory.write_reports_csv(os.path.join(cfg.run.out, "verify_reports.csv"), reports)
    _write_csv(os.path.join(cfg.run.out, "verify_monotone.csv"), ["instance", "delay", "n_violations", "worst_drop"],
               [[h, d, len(m.violations), repr(max((x[2] for x in m.violations), default=0.0))] for h, d, m in mono])
    by_lemma = {}
    for r in reports:
        by_lemma.setdefault(r.lemma, []).append(r)
    failed = False
    for lemma, rs in sorted(by_lemma.items()):
        print(f"{lemma}: {theory.summarize(rs)}")
        failed |= any(not (r.holds_per_x if v.per_x else r.holds) for r in rs)
    n_mono = sum(len(m.violations) for _, _, m in mono)
    print(f"monotone_improvement: {len(mono)} runs, {n_mono} violations")
    failed |= n_mono > 0
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_belief_bench(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.run.out, exist_ok=True)
    for seed in cfg.run.seeds:
        res = run_belief_bench(cfg.bench, seed)
        write_bench_csvs(res, os.path.join(cfg.run.out, f"bench_mse_seed{seed}.csv"),
                         os.path.join(cfg.run.out, f"bench_latency_seed{seed}.csv"))
        for k in sorted(res.mse):
            print(f"seed {seed} {k}: step-16 mse {res.mse[k][-1]:.4g}, latency {res.latency_ms[k]:.3f} ms, "
                  f"{res.n_params[k]} parameters")
    return EXIT_OK


def main(argv=None, env=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args, env)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "verify":
            return cmd_verify(cfg)
        return cmd_belief_bench(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeAbort, NonFiniteLoss) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

