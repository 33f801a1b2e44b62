"""Tests for the layered run configuration."""

import json

import pytest

from fewshotlib.config import CONFIG_ENV_VAR, RunConfig, load_run_config
from fewshotlib.episodes import Sampling, Split
from fewshotlib.evaluation.finetune import FinetuneVariant
from fewshotlib.exceptions import ConfigurationError
from fewshotlib.model import ExtractorKind


def test_defaults_match_training_schedule():
    """Defaults give 4-way 5-shot episodes and 50 optimizer steps per epoch."""
    cfg = load_run_config(environ={})
    train = cfg.train_config()
    assert (train.episode.n_way, train.episode.k_shot, train.episode.query_per_class) == (4, 5, 12)
    assert train.steps_per_epoch == 50
    assert train.grl_lambda == 0.01
    assert cfg.extractor.kind is ExtractorKind.GLU
    assert cfg.proto.temperature == 10.0


def test_config_echo_round_trips():
    """Feeding the echo back reproduces the configuration."""
    cfg = RunConfig.from_dict(
        {
            "seed": 3,
            "episode": {"sampling": "free", "k_shot": 3},
            "finetune": {"variant": "b", "steps": 5, "augment": {"num_time_masks": 1}},
            "synth": {"heldout": {"2": "test"}},
        }
    )
    echo = cfg.to_dict()
    assert RunConfig.from_dict(json.loads(json.dumps(echo))) == cfg
    assert echo["episode"]["sampling"] == "free"
    assert echo["finetune"]["variant"] == "b"


def test_unknown_key_is_named():
    """Unknown keys are rejected with their dotted name."""
    with pytest.raises(ConfigurationError, match="unknown config key train.lrr"):
        RunConfig.from_dict({"train": {"lrr": 1e-3}})


def test_unknown_nested_augment_key_is_named():
    """Augmentation keys are checked too."""
    with pytest.raises(ConfigurationError, match="finetune.augment.width"):
        RunConfig.from_dict({"finetune": {"augment": {"width": 3}}})


def test_unknown_section_is_rejected():
    """Top-level sections are fixed."""
    with pytest.raises(ConfigurationError, match="unknown config section 'optimizer'"):
        RunConfig.from_dict({"optimizer": {}})


@pytest.mark.parametrize(
    "document, match",
    [
        ({"episode": {"n_way": 1}}, "n_way"),
        ({"train": {"batches_per_epoch": 30}}, "positive multiple"),
        ({"episode": {"sampling": "sideways"}}, "episode.sampling"),
        ({"extractor": {"kind": "lstm"}}, "extractor.kind"),
        ({"sweep": {"variants": ["c"]}}, "sweep.variants"),
        ({"evaluation": {"jobs": 0}}, "evaluation.jobs"),
        ({"synth": {"heldout": {"1": "train"}}}, "synth.heldout"),
        ({"seed": -1}, "seed"),
    ],
)
def test_invalid_values_fail_early(document, match):
    """Invalid values are configuration errors raised while parsing."""
    with pytest.raises(ConfigurationError, match=match):
        RunConfig.from_dict(document)


def test_layers_apply_in_precedence_order(tmp_path):
    """Environment < file < overrides."""
    environ = {CONFIG_ENV_VAR: json.dumps({"train": {"lr": 0.1, "patience": 7}, "seed": 5})}
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"lr": 0.2}, "episode": {"k_shot": 3}}))

    cfg = load_run_config(path, {"train.lr": 0.3}, environ=environ)

    assert cfg.train.lr == 0.3
    assert cfg.train.patience == 7
    assert cfg.episode.k_shot == 3
    assert cfg.seed == 5
    assert load_run_config(path, environ=environ).train.lr == 0.2
    assert load_run_config(environ=environ).train.lr == 0.1


def test_bad_config_file_is_reported(tmp_path):
    """Malformed or missing files are configuration errors."""
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_run_config(path, environ={})
    with pytest.raises(ConfigurationError, match="cannot read config file"):
        load_run_config(tmp_path / "missing.json", environ={})


def test_model_config_widths_and_dann():
    """The wide preset uses 1024 hidden channels; DANN sizes the discriminator."""
    cfg = RunConfig.from_dict({"encoder": {"full_width": True}, "dann": {"enabled": True}})
    model_cfg = cfg.model_config(input_channels=40, num_datasets=3)
    assert model_cfg.encoder.hidden_channels == 1024
    assert model_cfg.dann_enabled and model_cfg.num_datasets == 3
    assert RunConfig().model_config(40, 3).num_datasets == 0


def test_eval_spec_offsets_seed_and_uses_within_split():
    """Evaluation episodes use the configured split and an offset seed."""
    cfg = RunConfig.from_dict({"seed": 2, "episode": {"sampling": "free"}})
    spec = cfg.eval_spec()
    assert spec.split is Split.TEST
    assert spec.seed == 20_002
    assert cfg.eval_spec(Split.VALIDATION).split is Split.VALIDATION
    assert cfg.episode.sampling is Sampling.FREE


def test_sweep_grid_from_config():
    """Sweep axes are converted to a validated grid."""
    document = {"sweep": {"variants": ["b"], "steps": [0, 5], "lrs": [1e-4]}}
    grid = RunConfig.from_dict(document).sweep_grid()
    assert grid.variants == (FinetuneVariant.B,)
    assert grid.steps == (0, 5)
