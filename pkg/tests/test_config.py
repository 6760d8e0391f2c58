from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from vood.config import (
    OUTPUT_ROOT_ENV,
    PRESETS,
    DataConfig,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    save_config,
)
from vood.core import AlphaSchedule
from vood.data import SpuriousSpec
from vood.errors import ConfigParseError
from vood.experiment import DESK_ALPHA, DESK_OPTIMIZER, DESK_SPEC


def round_trip(cfg: RunConfig) -> RunConfig:
    return config_from_dict(yaml.safe_load(dump_config(cfg)))


def test_defaults():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.classifier.sigma == 0.5
    assert cfg.synthesis.method == "grad_add"
    assert cfg.kl_direction == "u||p"


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_presets_round_trip(preset):
    cfg = config_from_dict({"preset": preset})
    assert cfg.classifier.sigma == 0.5
    assert round_trip(cfg) == cfg


def test_waterbirds_preset_values():
    cfg = config_from_dict({"preset": "waterbirds", "optimizer": {"epochs": 30}})
    assert cfg.lam == 0.1
    assert cfg.synthesis.p_inv == 10.0
    assert cfg.synthesis.alpha == AlphaSchedule.linear(300.0, 30.0, 30)


def test_preset_fields_can_be_overridden():
    cfg = config_from_dict({"preset": "cifar100", "lambda": 2.0})
    assert cfg.lam == 2.0 and cfg.synthesis.method == "invariant_shuffle"


@given(
    method=st.sampled_from(["grad_add", "grad_sub", "invariant_shuffle", "random_shuffle",
                            "gaussian_noise", "identity"]),
    lam=st.floats(0, 10),
    p_inv=st.floats(0.5, 100),
    epochs=st.integers(1, 50),
    seed=st.integers(0, 2**31),
    alpha=st.one_of(st.floats(0, 500), st.tuples(st.floats(0, 500), st.floats(0, 500))),
    pps=st.lists(st.sampled_from(["msp", "energy", "odin", "iodin", "iodin_channel", "tempscale"]),
                 min_size=1, max_size=4),
)
@settings(max_examples=60)
def test_round_trip_is_identity(method, lam, p_inv, epochs, seed, alpha, pps):
    raw_alpha = alpha if isinstance(alpha, float) else {"start": alpha[0], "end": alpha[1]}
    cfg = config_from_dict({"synthesis": {"method": method, "p_inv": p_inv, "alpha": raw_alpha},
                            "lambda": lam, "optimizer": {"epochs": epochs}, "seed": seed,
                            "postprocessors": pps})
    assert round_trip(cfg) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_alpha_forms():
    cfg = config_from_dict({"synthesis": {"alpha": 7}})
    assert cfg.synthesis.alpha == AlphaSchedule.constant(7.0)
    cfg = config_from_dict({"synthesis": {"alpha": {"start": 300, "end": 30}}, "optimizer": {"epochs": 12}})
    assert cfg.synthesis.alpha == AlphaSchedule.linear(300.0, 30.0, 12)


def test_step_granularity_needs_total_steps():
    with pytest.raises(ConfigParseError) as e:
        config_from_dict({"synthesis": {"alpha": {"start": 300, "end": 30}, "alpha_granularity": "step"}})
    assert e.value.field == "synthesis.alpha.total_steps"
    cfg = config_from_dict({"synthesis": {"alpha": {"start": 300, "end": 30, "total_steps": 500},
                                          "alpha_granularity": "step"}})
    assert cfg.synthesis.alpha.total_steps == 500


@pytest.mark.parametrize("raw, field", [
    ({"synthesis": {"method": "grad_mul"}}, "synthesis.method"),
    ({"synthesis": {"p_inv": 0}}, "synthesis.p_inv"),
    ({"synthesis": {"alpha": {"start": 1, "end": 2, "mode": "cosine"}}}, "synthesis.alpha.mode"),
    ({"synthesis": {"alpha": "big"}}, "synthesis.alpha"),
    ({"optimizer": {"lr": "fast"}}, "optimizer.lr"),
    ({"optimizer": {"epochs": 2.5}}, "optimizer.epochs"),
    ({"optimizer": {"nesterov": "yes"}}, "optimizer.nesterov"),
    ({"classifier": {"backbone": "vgg"}}, "classifier.backbone"),
    ({"classifier": {"sigma": -1}}, "classifier.sigma"),
    ({"odin": {"mask_mode": "random"}}, "odin.mask_mode"),
    ({"postprocessors": ["msp", "gram"]}, "postprocessors"),
    ({"kl_direction": "forward"}, "kl_direction"),
    ({"data": {"ood": ["a", "b"]}}, "data.ood"),
    ({"batch": 3}, "batch"),
    ({"optimizer": {"betas": 1}}, "optimizer.betas"),
    ({"preset": "svhn"}, "preset"),
])
def test_errors_name_the_field(raw, field):
    with pytest.raises(ConfigParseError) as e:
        config_from_dict(raw)
    assert e.value.field == field
    assert field in str(e.value)


def test_overrides():
    raw = apply_overrides({"synthesis": {"alpha": 10}}, [
        "lam=0.5", "optimizer.lr=0.01", "synthesis.alpha.end=5", "synthesis.alpha.start=50",
        "data.ood={far: /tmp/x}"])
    cfg = config_from_dict(raw)
    assert cfg.lam == 0.5
    assert cfg.optimizer.lr == 0.01
    assert (cfg.synthesis.alpha.start, cfg.synthesis.alpha.end) == (50.0, 5.0)
    assert cfg.data.ood == {"far": "/tmp/x"}
    with pytest.raises(ConfigParseError):
        apply_overrides({}, ["no-equals-sign"])


def test_overrides_do_not_mutate_input():
    raw = {"optimizer": {"lr": 1.0}}
    apply_overrides(raw, ["optimizer.lr=2"])
    assert raw == {"optimizer": {"lr": 1.0}}


def test_file_round_trip(tmp_path):
    cfg = config_from_dict({"preset": "waterbirds", "seed": 3})
    path = save_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg
    assert load_config(path, ["seed=4"]).seed == 4


def test_bad_yaml_file(tmp_path):
    (tmp_path / "c.yaml").write_text("optimizer: [unclosed\n")
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.yaml")


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert RunConfig(out_dir="runs/a").output_dir() == Path("runs/a")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert RunConfig(out_dir="runs/a").output_dir() == tmp_path / "runs/a"
    assert RunConfig(out_dir="/abs/b").output_dir() == Path("/abs/b")


def test_data_refs():
    assert DataConfig(benchmark="b").ref("train") == "b:train"
    assert DataConfig(benchmark="b").ref("/imgs/far") == "/imgs/far"
    assert DataConfig(benchmark="b").ref("other:test_id") == "other:test_id"
    assert DataConfig().ref("imgs") == "imgs"


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["desk_grad_add.yaml", "desk_ce.yaml"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert round_trip(cfg) == cfg


def test_shipped_desk_config_matches_recipe():
    cfg = load_config(CONFIGS / "desk_grad_add.yaml")
    assert cfg.synthesis.alpha == DESK_ALPHA
    assert cfg.optimizer == DESK_OPTIMIZER
    spec = yaml.safe_load((CONFIGS / "desk_benchmark.yaml").read_text())
    assert SpuriousSpec.from_dict(spec) == SpuriousSpec.from_dict(DESK_SPEC)
