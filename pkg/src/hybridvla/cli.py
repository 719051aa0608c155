"""Command line entry point: ``hybridvla <command> --config FILE --seed N --out DIR``.

Every command writes into ``<out>/<command>-<hash>/`` where the hash covers the
resolved config, the seed and the fingerprints of any input checkpoints.
Wall-clock figures go to ``timing.json`` so the other files are reproducible
byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .data import build_dataset, config_hash
from .env import default_suite, load_suite, suite_from_dict
from .eval import EvalConfig, evaluate, expert_policy, measure_latency, run_ablation_suite
from .model import ModelConfig, PolicySnapshot
from .rl import GrpoConfig, train_rl
from .rollout import DECODE_MODES
from .sft import SftConfig, train_sft

logger = logging.getLogger("hybridvla")


class ConfigError(ValueError):
    pass


def load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _pick(cfg, cls, extra=()):
    allowed = {f.name for f in fields(cls)} | set(extra)
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return {k: v for k, v in cfg.items() if k in {f.name for f in fields(cls)}}


def resolve_suite(value):
    if value in (None, "default"):
        return default_suite()
    if value == "distractors":
        return default_suite(distractors=True)
    if isinstance(value, dict):
        return suite_from_dict(value)
    return load_suite(value)


def run_dir(out, command, payload):
    path = Path(out) / f"{command}-{config_hash(payload)}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_datagen(args, cfg):
    params = {"suite": "default", "n_demos": 500, "h": 5, "n_bins": 256, "max_cot_len": 24} | cfg
    unknown = set(params) - {"suite", "n_demos", "h", "n_bins", "max_cot_len"}
    if unknown:
        raise ConfigError(f"unknown datagen keys: {sorted(unknown)}")
    suite = resolve_suite(params["suite"])
    payload = {"suite": suite.to_dict(), "n_demos": params["n_demos"], "h": params["h"],
               "n_bins": params["n_bins"], "max_cot_len": params["max_cot_len"], "seed": args.seed}
    out = run_dir(args.out, "datagen", payload)
    _, manifest = build_dataset(suite, params["n_demos"], args.seed, out, params["h"], params["n_bins"],
                                params["max_cot_len"])
    logger.info("wrote %d records to %s", manifest["n_records"], out)
    return out


def cmd_sft(args, cfg):
    cfg = dict(cfg)
    if args.data:
        cfg["dataset"] = args.data
    if not cfg.get("dataset"):
        raise ConfigError("sft needs a dataset path (config key 'dataset' or --data)")
    model = ModelConfig.from_dict(cfg.pop("model", {}) or {})
    sft_cfg = SftConfig(**_pick(cfg, SftConfig), model=model)
    sft_cfg.seed = args.seed
    dataset = Path(sft_cfg.dataset)
    manifest = dataset.with_name("manifest.json")
    payload = sft_cfg.to_dict() | {
        "dataset": config_hash(json.loads(manifest.read_text())) if manifest.exists() else str(dataset)}
    out = run_dir(args.out, "sft", payload)
    train_sft(sft_cfg, out)
    return out


def _suite_and_rest(cfg):
    cfg = dict(cfg)
    return resolve_suite(cfg.pop("suite", None)), cfg


def cmd_rl(args, cfg):
    if not args.init:
        raise ConfigError("rl needs --init <sft checkpoint>")
    suite, cfg = _suite_and_rest(cfg)
    rl_cfg = GrpoConfig(**_pick(cfg, GrpoConfig))
    rl_cfg.seed = args.seed
    init = PolicySnapshot.load(args.init)
    payload = rl_cfg.to_dict() | {"suite": suite.to_dict(), "init": init.fingerprint()}
    out = run_dir(args.out, "rl", payload)
    snap, _ = train_rl(rl_cfg, args.init, out, suite, init_snapshot=init)
    if rl_cfg.eval_conditions:
        ev = EvalConfig(rl_cfg.eval_conditions, args.seed, suite=suite)
        before, after = evaluate(init, ev), evaluate(snap, ev)
        _write_json(out / "report.json", {"sr_before": before.suite_sr, "sr_after": after.suite_sr,
                                          "per_task_before": before.per_task, "per_task_after": after.per_task})
    return out


def _eval_config(args, cfg):
    suite, cfg = _suite_and_rest(cfg)
    allowed = {"n_conditions", "cot_mode", "decode_mode", "random_cot_len", "n_latency_chunks"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    n_latency = cfg.pop("n_latency_chunks", 50)
    return EvalConfig(seed=args.seed, suite=suite, **cfg), n_latency


def cmd_eval(args, cfg):
    ev, _ = _eval_config(args, cfg)
    if args.expert:
        policy, source = expert_policy(h=5), "expert"
    elif args.ckpt:
        policy = PolicySnapshot.load(args.ckpt)
        source = policy.fingerprint()
    else:
        raise ConfigError("eval needs --ckpt or --expert")
    out = run_dir(args.out, "eval", ev.to_dict() | {"policy": source})
    report = evaluate(policy, ev)
    (out / "report.json").write_text(report.to_json())
    with open(out / "traces.jsonl", "w") as fh:
        for tr in report.traces:
            fh.write(json.dumps(tr, sort_keys=True) + "\n")
    _write_json(out / "timing.json", {"wall_clock_per_episode": report.wall_clock_per_episode})
    logger.info("suite SR %.3f", report.suite_sr)
    return out


def cmd_ablate(args, cfg):
    if not (args.sft and args.rl):
        raise ConfigError("ablate needs --sft and --rl checkpoints")
    ev, n_latency = _eval_config(args, cfg)
    sft, rl = PolicySnapshot.load(args.sft), PolicySnapshot.load(args.rl)
    out = run_dir(args.out, "ablate", ev.to_dict() | {"sft": sft.fingerprint(), "rl": rl.fingerprint(),
                                                      "n_latency_chunks": n_latency})
    run_ablation_suite(sft, rl, ev, out, n_latency)
    return out


def cmd_latency(args, cfg):
    if not args.ckpt:
        raise ConfigError("latency needs --ckpt")
    ev, n_latency = _eval_config(args, cfg)
    snap = PolicySnapshot.load(args.ckpt)
    out = run_dir(args.out, "latency", ev.to_dict() | {"policy": snap.fingerprint(), "n_latency_chunks": n_latency})
    counts, timing = {}, {}
    for mode in DECODE_MODES:
        lat = measure_latency(snap, mode, n_latency, args.seed, ev.suite)
        counts[mode] = {"passes_per_chunk": lat["passes_per_chunk"], "n_chunks": lat["n_chunks"]}
        timing[mode] = lat["wall_clock_per_chunk"]
    _write_json(out / "latency.json", counts)
    _write_json(out / "timing.json", timing)
    return out


COMMANDS = {
    "datagen": cmd_datagen,
    "sft": cmd_sft,
    "rl": cmd_rl,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "latency": cmd_latency,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs", help="parent directory for run outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="hybridvla", description="Hybrid-attention CoT policy lab")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="expert demos to a CoT dataset")
    p = sub.add_parser("sft", parents=[common], help="supervised training")
    p.add_argument("--data", help="dataset.jsonl (overrides config)")
    p = sub.add_parser("rl", parents=[common], help="grouped RL fine-tuning")
    p.add_argument("--init", help="SFT checkpoint")
    p = sub.add_parser("eval", parents=[common], help="suite success rate")
    p.add_argument("--ckpt")
    p.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    p = sub.add_parser("ablate", parents=[common], help="CoT intervention and latency table")
    p.add_argument("--sft")
    p.add_argument("--rl")
    p = sub.add_parser("latency", parents=[common], help="action-block forward passes and timing")
    p.add_argument("--ckpt")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = COMMANDS[args.command](args, load_config(args.config))
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
