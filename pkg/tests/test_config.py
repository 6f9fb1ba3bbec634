"""Config parsing, defaults, validation, and the training-identity hash."""

import numpy as np
import pytest

from objimplant.config import ConfigError, FinetuneSettings, load_config, save_config
from objimplant.encoders import save_image, save_mask
from objimplant.shapes import sample_shape
from objimplant.util import seeded_rng


def write_object_files(tmp_path):
    scene = sample_shape(seeded_rng(111, "cfg-object"))
    save_image(tmp_path / "object.png", scene.image)
    save_mask(tmp_path / "mask.png", scene.mask)
    return scene


def minimal_yaml(tmp_path, extra: str = "") -> str:
    path = tmp_path / "project.yaml"
    path.write_text(
        "output_dir: out\n"
        "objects:\n"
        "  - identifier: \"[v*]\"\n"
        "    class_name: triangle\n"
        "    image_path: object.png\n"
        "    mask_path: mask.png\n" + extra,
        encoding="utf-8",
    )
    return str(path)


def test_defaults_match_documented_training_settings(tmp_path):
    write_object_files(tmp_path)
    config = load_config(minimal_yaml(tmp_path))
    ft = config.finetune
    assert ft.lr == 1e-4
    assert ft.steps == 100
    assert ft.batch_size == 1
    assert ft.alpha_cl == 1.0
    assert ft.p_cl == 1.0
    assert ft.subset_size == 2
    assert config.seed == 0


def test_defaults_are_the_dataclass_defaults():
    ft = FinetuneSettings()
    assert (ft.lr, ft.steps, ft.batch_size, ft.alpha_cl, ft.p_cl, ft.subset_size) == (
        1e-4,
        100,
        1,
        1.0,
        1.0,
        2,
    )


def test_missing_mask_file_fails_fast_naming_path(tmp_path):
    write_object_files(tmp_path)
    (tmp_path / "mask.png").unlink()
    with pytest.raises(ConfigError) as err:
        load_config(minimal_yaml(tmp_path))
    assert "mask.png" in str(err.value)


def test_unknown_keys_rejected(tmp_path):
    write_object_files(tmp_path)
    with pytest.raises(ConfigError):
        load_config(minimal_yaml(tmp_path, "finetune:\n  learning_rate: 0.1\n"))
    with pytest.raises(ConfigError):
        load_config(minimal_yaml(tmp_path, "mystery_section: {}\n"))


def test_invalid_yaml_rejected(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("objects: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_overrides_apply(tmp_path):
    write_object_files(tmp_path)
    config = load_config(minimal_yaml(tmp_path), seed_override=9, output_dir_override=str(tmp_path / "alt"))
    assert config.seed == 9
    assert config.output_dir == str(tmp_path / "alt")


def test_train_hash_ignores_output_dir_and_eval(tmp_path):
    write_object_files(tmp_path)
    a = load_config(minimal_yaml(tmp_path))
    b = load_config(minimal_yaml(tmp_path), output_dir_override=str(tmp_path / "elsewhere"))
    c = load_config(minimal_yaml(tmp_path, "eval:\n  prompts: [\"a photo of [v*]\"]\n"))
    assert a.train_hash() == b.train_hash() == c.train_hash()


def test_train_hash_tracks_training_settings(tmp_path):
    write_object_files(tmp_path)
    a = load_config(minimal_yaml(tmp_path))
    b = load_config(minimal_yaml(tmp_path, "finetune:\n  lr: 0.01\n"))
    c = load_config(minimal_yaml(tmp_path), seed_override=5)
    assert a.train_hash() != b.train_hash()
    assert a.train_hash() != c.train_hash()


def test_train_hash_ignores_step_budget(tmp_path):
    """Extending the budget must not orphan earlier checkpoints."""
    write_object_files(tmp_path)
    a = load_config(minimal_yaml(tmp_path, "finetune:\n  steps: 50\n"))
    b = load_config(minimal_yaml(tmp_path, "finetune:\n  steps: 100\n"))
    assert a.train_hash() == b.train_hash()


def test_save_config_round_trip(tmp_path):
    write_object_files(tmp_path)
    config = load_config(minimal_yaml(tmp_path, "finetune:\n  lr: 0.01\n  n_tokens: 3\n"))
    out = tmp_path / "snapshot.yaml"
    save_config(out, config)
    again = load_config(out)
    assert again.finetune.lr == 0.01
    assert again.finetune.n_tokens == 3
    assert again.objects[0].identifier == "[v*]"
    assert again.train_hash() == config.train_hash()


def test_duplicate_identifiers_rejected(tmp_path):
    write_object_files(tmp_path)
    extra = (
        "  - identifier: \"[v*]\"\n"
        "    class_name: triangle\n"
        "    image_path: object.png\n"
        "    mask_path: mask.png\n"
    )
    with pytest.raises(ConfigError):
        load_config(minimal_yaml(tmp_path, extra))
