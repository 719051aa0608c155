import json

import pytest

from hybridvla.cli import ConfigError, load_config, main
from pipeline import DETERMINISTIC, write_yaml, run_pipeline


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("a")), run_pipeline(tmp_path_factory.mktemp("b"))


def test_every_command_is_byte_reproducible(two_runs):
    a, b = two_runs
    for cmd, names in DETERMINISTIC.items():
        assert a[cmd].name == b[cmd].name  # same config hash
        for name in names:
            assert (a[cmd] / name).read_bytes() == (b[cmd] / name).read_bytes(), (cmd, name)


def test_run_outputs(two_runs):
    a, _ = two_runs
    latency = json.loads((a["latency"] / "latency.json").read_text())
    assert latency["hybrid"]["passes_per_chunk"] == 1
    assert latency["ar_emulation"]["passes_per_chunk"] == 15
    assert json.loads((a["eval"] / "report.json").read_text())["n_conditions"] == 1
    assert (a["ablate"] / "ablation_sr.png").exists()
    assert (a["rl"] / "config.json").exists()


def test_expert_eval(tmp_path):
    cfg = write_yaml(tmp_path / "e.yaml", {"n_conditions": 2})
    assert main(["eval", "--expert", "--config", cfg, "--out", str(tmp_path / "runs")]) == 0
    report = next((tmp_path / "runs").glob("eval-*/report.json"))
    assert json.loads(report.read_text())["suite_sr"] == 1.0


def test_bad_config_reports_error(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "bad.yaml", {"n_demo": 3})
    assert main(["datagen", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "unknown" in capsys.readouterr().err
    assert main(["rl", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--out", str(tmp_path)]) == 2


def test_load_config_requires_mapping(tmp_path):
    (tmp_path / "x.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.yaml")
    assert load_config(None) == {}


@pytest.mark.parametrize("name", ["datagen", "sft", "rl", "eval"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    from hybridvla.cli import _eval_config, _pick, build_parser, resolve_suite
    from hybridvla.model import ModelConfig
    from hybridvla.rl import GrpoConfig
    from hybridvla.sft import SftConfig

    cfg = load_config(Path(__file__).parents[1] / "configs" / f"{name}.yaml")
    if name == "sft":
        model = ModelConfig.from_dict(cfg.pop("model"))
        assert model == ModelConfig()
        assert SftConfig(**_pick(cfg, SftConfig), model=model).steps == 6000
    elif name == "rl":
        resolve_suite(cfg.pop("suite"))
        assert GrpoConfig(**_pick(cfg, GrpoConfig)).to_dict() == GrpoConfig().to_dict()
    elif name == "eval":
        assert _eval_config(build_parser().parse_args(["eval"]), cfg)[0].n_conditions == 20
    else:
        assert cfg["n_demos"] == 500
