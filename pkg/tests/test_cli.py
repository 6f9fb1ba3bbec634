"""End-to-end command line flows on tiny training budgets."""

import json

import numpy as np
import pytest

from objimplant.cli import EXIT_CONFIG, EXIT_OK, main
from objimplant.encoders import save_image, save_mask
from objimplant.shapes import sample_scene, sample_shape
from objimplant.util import seeded_rng


def write_project(tmp_path, n_objects=1, steps=3, extra_eval="", seed=0, object_order=None):
    """Lay out object files plus a YAML config with a tiny budget."""
    if n_objects == 1:
        scene = sample_shape(seeded_rng(151, "cli-object"))
        images = [(scene.image, scene.mask, scene.class_name)]
    else:
        image, masks, names = sample_scene(seeded_rng(152, "cli-scene"), n_objects=n_objects)
        images = [(image, masks[i], names[i]) for i in range(n_objects)]

    save_image(tmp_path / "object-0.png", images[0][0])  # one shared scene image
    order = object_order if object_order is not None else range(n_objects)
    objects_yaml = ""
    for i in order:
        _, mask, class_name = images[i]
        save_mask(tmp_path / f"mask-{i}.png", mask)
        objects_yaml += (
            f"  - identifier: \"[v{i}*]\"\n"
            f"    class_name: {class_name}\n"
            f"    image_path: object-0.png\n"
            f"    mask_path: mask-{i}.png\n"
        )
    config = tmp_path / "project.yaml"
    config.write_text(
        f"output_dir: out\nseed: {seed}\nobjects:\n{objects_yaml}"
        f"finetune:\n  steps: {steps}\n  lr: 1.0e-3\n  n_tokens: 2\n"
        f"init:\n  max_steps: 30\n{extra_eval}",
        encoding="utf-8",
    )
    return config


def test_init_embedding_writes_archive_and_report(tmp_path, capsys):
    config = write_project(tmp_path)
    assert main(["init-embedding", "--config", str(config)]) == EXIT_OK
    out = tmp_path / "out"
    assert (out / "embeddings.ntar").is_file()
    report = json.loads((out / "init_report.json").read_text(encoding="utf-8"))
    assert len(report["objects"]) == 1
    assert report["objects"][0]["identifier"] == "[v0*]"
    assert "initialized [v0*]" in capsys.readouterr().out


def test_init_embedding_refuses_overwrite_without_force(tmp_path):
    config = write_project(tmp_path)
    assert main(["init-embedding", "--config", str(config)]) == EXIT_OK
    assert main(["init-embedding", "--config", str(config)]) == EXIT_CONFIG
    assert main(["init-embedding", "--config", str(config), "--force"]) == EXIT_OK


def test_init_embedding_rerun_is_bitwise_identical(tmp_path):
    config = write_project(tmp_path)
    assert main(["init-embedding", "--config", str(config)]) == EXIT_OK
    first = (tmp_path / "out" / "embeddings.ntar").read_bytes()
    assert main(["init-embedding", "--config", str(config), "--force"]) == EXIT_OK
    assert (tmp_path / "out" / "embeddings.ntar").read_bytes() == first


def test_init_embedding_two_objects_order_swap(tmp_path):
    config = write_project(tmp_path, n_objects=2)
    assert main(["init-embedding", "--config", str(config)]) == EXIT_OK
    report = json.loads((tmp_path / "out" / "init_report.json").read_text(encoding="utf-8"))
    idents = [row["identifier"] for row in report["objects"]]
    assert idents == ["[v0*]", "[v1*]"]

    # swap the object order in the config: rows swap, fits stay per-object
    config = write_project(tmp_path, n_objects=2, object_order=[1, 0])
    assert main(["init-embedding", "--config", str(config), "--force"]) == EXIT_OK
    report2 = json.loads((tmp_path / "out" / "init_report.json").read_text(encoding="utf-8"))
    assert [row["identifier"] for row in report2["objects"]] == ["[v1*]", "[v0*]"]
    by_ident = {row["identifier"]: row["loss"] for row in report["objects"]}
    by_ident2 = {row["identifier"]: row["loss"] for row in report2["objects"]}
    assert by_ident == by_ident2


def test_missing_mask_is_config_error(tmp_path):
    config = write_project(tmp_path)
    (tmp_path / "mask-0.png").unlink()
    assert main(["init-embedding", "--config", str(config)]) == EXIT_CONFIG


def test_finetune_requires_init_or_auto_init(tmp_path):
    config = write_project(tmp_path)
    assert main(["finetune", "--config", str(config)]) == EXIT_CONFIG
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = tmp_path / "out" / "bundle"
    manifest = json.loads((bundle / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["identifiers"] == ["[v0*]"]
    assert manifest["steps_trained"] == 3
    assert len(manifest["adapter_targets"]) == 12


def test_finetune_then_generate_round_trip(tmp_path):
    config = write_project(tmp_path)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    assert (
        main(["generate", "--bundle", bundle, "--prompt", "a photo of [v0*]", "--count", "2", "--seed", "4"])
        == EXIT_OK
    )
    gen = tmp_path / "out" / "bundle" / "generated"
    assert (gen / "gen-000.png").is_file() and (gen / "gen-001.png").is_file()
    sidecar = json.loads((gen / "gen-000.json").read_text(encoding="utf-8"))
    assert sidecar["prompt"] == "a photo of [v0*]"
    assert sidecar["seed"] == 4


def test_generate_deterministic_across_reruns(tmp_path):
    config = write_project(tmp_path)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    args = ["generate", "--bundle", bundle, "--prompt", "a photo of [v0*]", "--count", "1", "--seed", "0"]
    assert main(args) == EXIT_OK
    first = (tmp_path / "out" / "bundle" / "generated" / "gen-000.png").read_bytes()
    assert main(args) == EXIT_CONFIG  # refuses to overwrite
    assert main(args + ["--force"]) == EXIT_OK
    assert (tmp_path / "out" / "bundle" / "generated" / "gen-000.png").read_bytes() == first


def test_generate_rejects_unknown_identifier(tmp_path, capsys):
    config = write_project(tmp_path)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    code = main(["generate", "--bundle", bundle, "--prompt", "a photo of [ghost*]"])
    assert code == EXIT_CONFIG
    assert "[ghost*]" in capsys.readouterr().err


def test_generate_accepts_prompt_with_both_identifiers(tmp_path):
    config = write_project(tmp_path, n_objects=2)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    code = main(
        ["generate", "--bundle", bundle, "--prompt", "a photo of [v0*] and [v1*]", "--count", "1"]
    )
    assert code == EXIT_OK


def test_generate_rejects_nonpositive_count(tmp_path):
    config = write_project(tmp_path)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    assert main(["generate", "--bundle", bundle, "--prompt", "a photo of [v0*]", "--count", "0"]) == EXIT_CONFIG


def test_evaluate_counts_and_reports(tmp_path, capsys):
    eval_section = (
        "eval:\n"
        "  prompts: [\"a photo of [v0*]\", \"a photo of the [v0*]\"]\n"
        "  seeds: [0, 1]\n"
        "  num_sample_steps: 4\n"
        "  kid_reference_count: 8\n"
    )
    config = write_project(tmp_path, extra_eval=eval_section)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    assert main(["evaluate", "--bundle", bundle, "--config", str(config)]) == EXIT_OK

    out = tmp_path / "out" / "bundle" / "eval"
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["n_images"] == 4
    assert report["n_prompts"] == 2
    assert len(list((out / "images").glob("eval-*.png"))) == 4
    assert report["diagnostics"]["self_ia"] == pytest.approx(1.0, abs=1e-12)
    header = (out / "report.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "IA,TA,KID"
    stdout = capsys.readouterr().out
    summary = json.loads(stdout.strip().splitlines()[-1])
    assert {"ia", "ta", "kid"} <= set(summary)


def test_evaluate_requires_prompts(tmp_path):
    config = write_project(tmp_path)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    bundle = str(tmp_path / "out" / "bundle")
    assert main(["evaluate", "--bundle", bundle, "--config", str(config)]) == EXIT_CONFIG


def test_resume_flag_continues_to_budget(tmp_path):
    config = write_project(tmp_path, steps=4)
    assert main(["finetune", "--config", str(config), "--auto-init"]) == EXIT_OK
    out = tmp_path / "out"
    ckpt = out / "checkpoint.ntar"
    assert ckpt.is_file()
    # identical rerun through resume: already at the budget, re-exports
    assert main(["finetune", "--config", str(config), "--resume", str(ckpt)]) == EXIT_OK
    log_lines = (out / "steps.jsonl").read_text(encoding="utf-8").strip().splitlines()
    assert len(log_lines) == 4  # no duplicate steps appended


def test_missing_bundle_is_config_error(tmp_path):
    assert main(["generate", "--bundle", str(tmp_path / "nope"), "--prompt", "a photo"]) == EXIT_CONFIG
