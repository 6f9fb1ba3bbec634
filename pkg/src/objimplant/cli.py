"""Command line interface for the four pipeline stages.

``init-embedding`` fits identifier prompt rows, ``finetune`` trains the
adapters and exports the artifact bundle, ``generate`` samples from a
bundle, and ``evaluate`` scores generated sets.  Exit codes: 0 success,
2 configuration/usage error, 3 runtime abort.  No command overwrites
its own outputs unless ``--force`` is passed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import pretrain_backend
from .config import ConfigError, load_config
from .encoders import UnknownIdentifierError, load_image, save_image
from .evalkit import MetricReport, image_alignment, kid, make_toy_extractor, text_alignment, write_report
from .shapes import sample_shape
from .trainer import (
    FinetuneSession,
    initialize_embeddings,
    load_bundle,
    load_embeddings,
    load_objects,
    save_embeddings,
)
from .util import seeded_rng, strict_cosine

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _check_overwrite(paths, force: bool) -> None:
    if force:
        return
    for path in paths:
        if Path(path).exists():
            raise ConfigError(f"output already exists: {path} (pass --force to overwrite)")


def cmd_init_embedding(args) -> int:
    config = load_config(args.config, seed_override=args.seed, output_dir_override=args.output_dir)
    out = Path(config.output_dir)
    archive_path = out / "embeddings.ntar"
    report_path = out / "init_report.json"
    _check_overwrite([archive_path, report_path], args.force)

    backend = pretrain_backend(config.backend)
    objects = load_objects(config)
    results = initialize_embeddings(backend, objects, config.init, config.finetune.n_tokens, config.seed)

    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(archive_path, results, config.seed)
    rows = [
        {
            "identifier": obj.identifier,
            "class_name": obj.class_name,
            "loss": results[obj.identifier].loss,
            "steps": results[obj.identifier].steps,
        }
        for obj in objects
    ]
    report_path.write_text(json.dumps({"objects": rows}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for row in rows:
        print(f"initialized {row['identifier']}: alignment loss {row['loss']:.6f} after {row['steps']} steps")
    return EXIT_OK


def cmd_finetune(args) -> int:
    config = load_config(args.config, seed_override=args.seed, output_dir_override=args.output_dir)
    out = Path(config.output_dir)
    bundle_dir = out / "bundle"
    log_path = out / "steps.jsonl"
    checkpoint_path = out / "checkpoint.ntar"
    outputs = [
        log_path,
        checkpoint_path,
        bundle_dir / "bundle.ntar",
        bundle_dir / "manifest.json",
        bundle_dir / "config.yaml",
        bundle_dir / "vocabulary.txt",
    ]
    if args.resume is None:
        _check_overwrite(outputs, args.force)

    backend = pretrain_backend(config.backend)
    objects = load_objects(config)

    out.mkdir(parents=True, exist_ok=True)
    embeddings_path = out / "embeddings.ntar"
    if embeddings_path.is_file():
        for obj in objects:
            backend.vocabulary.reserve_identifier(obj.identifier, config.finetune.n_tokens)
        initial_rows, _ = load_embeddings(embeddings_path)
    elif args.auto_init:
        results = initialize_embeddings(backend, objects, config.init, config.finetune.n_tokens, config.seed)
        save_embeddings(embeddings_path, results, config.seed)
        initial_rows = {ident: r.rows for ident, r in results.items()}
    else:
        raise ConfigError(
            f"missing stage-1 embeddings at {embeddings_path}; run init-embedding first or pass --auto-init"
        )

    session = FinetuneSession(
        backend, objects, config.finetune, config.seed, initial_rows, train_hash=config.train_hash()
    )
    if args.resume is not None:
        session.restore_checkpoint(args.resume)
    elif log_path.exists():
        log_path.unlink()  # fresh run replaces the step log instead of appending
    session.run(log_path=log_path)
    session.save_checkpoint(checkpoint_path)
    session.export_bundle(bundle_dir, config)
    print(f"fine-tuned {len(objects)} object(s) to step {session.step_index}; bundle at {bundle_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    bundle_dir = Path(args.bundle)
    model = load_bundle(bundle_dir)
    model.context(args.prompt)  # validate identifiers before touching any output
    out = Path(args.output_dir) if args.output_dir else bundle_dir / "generated"
    image_paths = [out / f"gen-{i:03d}.png" for i in range(args.count)]
    meta_paths = [out / f"gen-{i:03d}.json" for i in range(args.count)]
    _check_overwrite(image_paths + meta_paths, args.force)

    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        rng = seeded_rng(args.seed, "gen", i)
        image = model.generate_image(
            args.prompt, rng=rng, num_sample_steps=args.sample_steps, guidance_scale=args.guidance
        )
        save_image(image_paths[i], image)
        sidecar = {
            "prompt": args.prompt,
            "seed": args.seed,
            "index": i,
            "num_sample_steps": args.sample_steps,
            "guidance_scale": args.guidance,
        }
        meta_paths[i].write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {args.count} image(s) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle_dir = Path(args.bundle)
    config_path = args.config if args.config else bundle_dir / "config.yaml"
    config = load_config(config_path, seed_override=args.seed)
    ev = config.eval
    if not ev.prompts:
        raise ConfigError("eval.prompts must not be empty")
    n_images = len(ev.prompts) * len(ev.seeds)
    if n_images < 2:
        raise ConfigError("KID needs at least 2 generated images; add eval prompts or seeds")

    out = Path(args.output_dir) if args.output_dir else bundle_dir / "eval"
    image_paths = [out / "images" / f"eval-{i:03d}.png" for i in range(n_images)]
    _check_overwrite([out / "report.json", out / "report.csv"] + image_paths, args.force)

    backend = pretrain_backend(config.backend)
    model = load_bundle(bundle_dir, backend)
    reference = load_image(ev.reference or config.objects[0].image_path)
    encoder = backend.encoders.image

    generated, pairs = [], []
    for prompt in ev.prompts:
        pooled = model.context(prompt).pooled
        for seed in ev.seeds:
            rng = seeded_rng(config.seed, "eval", prompt, seed)
            image = model.generate_image(
                prompt, rng=rng, num_sample_steps=ev.num_sample_steps, guidance_scale=ev.guidance_scale
            )
            generated.append(image)
            pairs.append((prompt, seed, pooled))

    ia = image_alignment(generated, reference, encoder)
    ta = text_alignment(generated, [p[2] for p in pairs], encoder)

    # reference distribution for KID: fresh procedural scenes of the
    # configured object classes
    classes = sorted({obj.class_name for obj in config.objects})
    ref_rng = seeded_rng(config.seed, "kid-ref")
    ref_images = [
        sample_shape(ref_rng, classes=(classes[i % len(classes)],)).image
        for i in range(ev.kid_reference_count)
    ]
    extract = make_toy_extractor(encoder)
    kid_value = kid(extract(generated), extract(ref_images))

    report = MetricReport(ia=ia, ta=ta, kid=kid_value, n_images=n_images, n_prompts=len(ev.prompts))
    per_image = [
        {
            "prompt": prompt,
            "seed": seed,
            "ia": image_alignment([img], reference, encoder),
            "ta": float(strict_cosine(encoder.encode(img), pooled.detach())),
        }
        for img, (prompt, seed, pooled) in zip(generated, pairs)
    ]
    diagnostics = {"self_ia": image_alignment([reference], reference, encoder), "per_image": per_image}

    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for path, img in zip(image_paths, generated):
        save_image(path, img)
    write_report(out, report, diagnostics)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objimplant",
        description="One-shot object implantation for a toy latent diffusion model.",
    )
    parser.add_argument("--verbose", action="store_true", help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="project config file (YAML)")
        p.add_argument("--output-dir", default=None, help="override the config's output_dir")
        p.add_argument("--seed", type=int, default=None, help="override the config's seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p_init = sub.add_parser("init-embedding", help="fit identifier prompt embeddings to their prototypes")
    add_common(p_init)
    p_init.set_defaults(func=cmd_init_embedding)

    p_ft = sub.add_parser("finetune", help="train adapters + embeddings and export the bundle")
    add_common(p_ft)
    p_ft.add_argument("--auto-init", action="store_true", help="run embedding initialization if missing")
    p_ft.add_argument("--resume", default=None, help="checkpoint archive to continue from")
    p_ft.set_defaults(func=cmd_finetune)

    p_gen = sub.add_parser("generate", help="sample images from an exported bundle")
    p_gen.add_argument("--bundle", required=True, help="bundle directory written by finetune")
    p_gen.add_argument("--prompt", required=True, help="prompt; may use implanted identifiers")
    p_gen.add_argument("--count", type=int, default=1, help="number of images")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--output-dir", default=None, help="default: <bundle>/generated")
    p_gen.add_argument("--sample-steps", type=int, default=25)
    p_gen.add_argument("--guidance", type=float, default=1.0)
    p_gen.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p_gen.set_defaults(func=cmd_generate)

    p_eval = sub.add_parser("evaluate", help="generate per-prompt images and score IA/TA/KID")
    p_eval.add_argument("--bundle", required=True, help="bundle directory written by finetune")
    p_eval.add_argument("--config", default=None, help="default: the bundle's config snapshot")
    p_eval.add_argument("--output-dir", default=None, help="default: <bundle>/eval")
    p_eval.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p_eval.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownIdentifierError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps everything to exit 3
        log.debug("runtime abort", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
