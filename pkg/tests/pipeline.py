"""Tiny end-to-end CLI pipeline shared by the CLI and acceptance tests."""
from pathlib import Path

import yaml

from hybridvla.cli import main

TINY_MODEL = {"layers": 1, "heads": 2, "model_dim": 16, "max_cot_len": 16}
DETERMINISTIC = {
    "datagen": ["dataset.jsonl", "manifest.json", "trajectories.jsonl"],
    "sft": ["metrics.jsonl", "final.ckpt"],
    "rl": ["metrics.jsonl", "final.ckpt", "report.json"],
    "eval": ["report.json", "traces.jsonl"],
    "ablate": ["ablation.json", "ablation.md"],
    "latency": ["latency.json"],
}


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj))
    return str(path)


def run_pipeline(root, seed=0):
    """datagen -> sft -> rl -> eval/ablate/latency with tiny settings; returns run dirs."""
    root = Path(root)
    cfgs = root / "cfg"
    cfgs.mkdir(parents=True, exist_ok=True)
    out = str(root / "runs")
    dirs = {}

    def call(argv):
        assert main(argv) == 0
        return Path(sorted(Path(out).glob(f"{argv[0]}-*"), key=lambda p: p.stat().st_mtime)[-1])

    dirs["datagen"] = call(["datagen", "--config", write_yaml(cfgs / "d.yaml", {"n_demos": 4}),
                            "--seed", str(seed), "--out", out])
    sft_cfg = {"dataset": str(dirs["datagen"] / "dataset.jsonl"), "steps": 4, "batch_size": 4,
               "log_every": 2, "model": TINY_MODEL}
    dirs["sft"] = call(["sft", "--config", write_yaml(cfgs / "s.yaml", sft_cfg), "--seed", str(seed), "--out", out])
    ckpt = str(dirs["sft"] / "final.ckpt")
    suite = {"grid": [7, 7], "objects": ["block"], "zones": {"left": [[0, 2], [1, 4]]}, "max_steps": 10}
    rl_cfg = {"G": 2, "iterations": 1, "epochs": 1, "minibatch_size": 2, "eval_conditions": 1, "suite": suite}
    dirs["rl"] = call(["rl", "--config", write_yaml(cfgs / "r.yaml", rl_cfg), "--init", ckpt, "--seed", str(seed),
                       "--out", out])
    ev = write_yaml(cfgs / "e.yaml", {"n_conditions": 1, "suite": suite, "n_latency_chunks": 2})
    dirs["eval"] = call(["eval", "--config", ev, "--ckpt", ckpt, "--seed", str(seed), "--out", out])
    dirs["ablate"] = call(["ablate", "--config", ev, "--sft", ckpt, "--rl", str(dirs["rl"] / "final.ckpt"),
                           "--seed", str(seed), "--out", out])
    dirs["latency"] = call(["latency", "--config", ev, "--ckpt", ckpt, "--seed", str(seed), "--out", out])
    return dirs
