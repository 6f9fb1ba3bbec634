"""Project configuration: schema, validation, and YAML round-tripping.

One structured file drives every pipeline stage.  Loading resolves
paths against the config file's directory and validates eagerly (file
existence, identifier uniqueness, ranges), so a bad config fails before
any training starts.  Saving writes every field with sorted keys, so
load -> save -> load is the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .backend import BackendConfig
from .encoders import IDENTIFIER_PATTERN
from .util import dict_hash


class ConfigError(ValueError):
    """Invalid or inconsistent project configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class ObjectConfig:
    identifier: str
    class_name: str
    image_path: str
    mask_path: str


@dataclass(frozen=True)
class FinetuneSettings:
    steps: int = 100
    lr: float = 1e-4
    batch_size: int = 1
    alpha_cl: float = 1.0
    p_cl: float = 1.0
    subset_size: int = 2
    subset_strategy: str = "uniform"
    n_tokens: int = 4
    lora_rank: int = 4
    lora_scale: float = 1.0
    adapt_text_encoder: bool = False


@dataclass(frozen=True)
class InitSettings:
    max_steps: int = 500
    lr: float = 1e-2
    tol: float = 1e-3
    patience: int = 50


@dataclass(frozen=True)
class EvalSettings:
    prompts: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    num_sample_steps: int = 25
    guidance_scale: float = 1.0
    reference: str | None = None  # defaults to the first object's image
    kid_reference_count: int = 64


@dataclass(frozen=True)
class ProjectConfig:
    objects: tuple[ObjectConfig, ...]
    output_dir: str
    seed: int = 0
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    init: InitSettings = field(default_factory=InitSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_hash(self) -> str:
        """Hash of everything that shapes the training trajectory.

        ``steps`` is excluded on purpose: a checkpoint taken at step 50
        must resume under a config that only extends the step budget.
        ``output_dir`` and ``eval`` never affect the trajectory.
        """
        payload = self.to_dict()
        payload.pop("output_dir")
        payload.pop("eval")
        payload["finetune"] = dict(payload["finetune"])
        payload["finetune"].pop("steps")
        return dict_hash(payload)


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _build_section(cls, section: dict, where: str):
    names = {f.name for f in fields(cls)}
    _require_keys(section, names, where)
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from None


def _validate(config: ProjectConfig) -> None:
    if not config.objects:
        raise ConfigError("config must declare at least one object")
    seen = set()
    for obj in config.objects:
        if IDENTIFIER_PATTERN.match(obj.identifier) is None:
            raise ConfigError(f"identifier {obj.identifier!r} must look like '[name*]'")
        if obj.identifier in seen:
            raise ConfigError(f"duplicate identifier {obj.identifier!r}")
        seen.add(obj.identifier)
        for label, p in (("image_path", obj.image_path), ("mask_path", obj.mask_path)):
            if not Path(p).is_file():
                raise ConfigError(f"{label} for {obj.identifier!r} does not exist: {p}")
    images = {obj.image_path for obj in config.objects}
    if len(images) > 1:
        raise ConfigError(
            "all objects must share one training image (joint training noises a single scene); "
            f"got {len(images)} distinct image paths"
        )
    ft = config.finetune
    if ft.steps < 1 or ft.batch_size < 1 or ft.n_tokens < 1 or ft.lora_rank < 1 or ft.subset_size < 1:
        raise ConfigError("steps, batch_size, n_tokens, lora_rank, and subset_size must all be >= 1")
    if not 0.0 <= ft.p_cl <= 1.0:
        raise ConfigError(f"p_cl must be in [0, 1], got {ft.p_cl}")
    if ft.subset_strategy not in ("uniform", "roundrobin"):
        raise ConfigError(f"subset_strategy must be 'uniform' or 'roundrobin', got {ft.subset_strategy!r}")
    if ft.lr <= 0 or config.init.lr <= 0:
        raise ConfigError("learning rates must be positive")
    ev = config.eval
    if not ev.seeds:
        raise ConfigError("eval.seeds must not be empty")
    if ev.num_sample_steps < 1:
        raise ConfigError("eval.num_sample_steps must be >= 1")
    if ev.reference is not None and not Path(ev.reference).is_file():
        raise ConfigError(f"eval.reference does not exist: {ev.reference}")


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    path = Path(p)
    return str(path if path.is_absolute() else (base / path).resolve())


def load_config(path, seed_override: int | None = None, output_dir_override: str | None = None) -> ProjectConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _require_keys(raw, {"objects", "output_dir", "seed", "finetune", "init", "eval", "backend"}, "config root")

    base = path.parent.resolve()
    objects = []
    raw_objects = raw.get("objects")
    if not isinstance(raw_objects, list):
        raise ConfigError("'objects' must be a list")
    for i, entry in enumerate(raw_objects):
        if not isinstance(entry, dict):
            raise ConfigError(f"objects[{i}] must be a mapping")
        _require_keys(entry, {"identifier", "class_name", "image_path", "mask_path"}, f"objects[{i}]")
        missing = {"identifier", "class_name", "image_path", "mask_path"} - set(entry)
        if missing:
            raise ConfigError(f"objects[{i}] missing key(s): {', '.join(sorted(missing))}")
        objects.append(
            ObjectConfig(
                identifier=str(entry["identifier"]),
                class_name=str(entry["class_name"]),
                image_path=_resolve(base, str(entry["image_path"])),
                mask_path=_resolve(base, str(entry["mask_path"])),
            )
        )

    if "output_dir" not in raw and output_dir_override is None:
        raise ConfigError("config must set output_dir (or pass --output-dir)")
    eval_raw = dict(raw.get("eval", {}))
    if "prompts" in eval_raw:
        eval_raw["prompts"] = tuple(str(p) for p in eval_raw["prompts"])
    if "seeds" in eval_raw:
        eval_raw["seeds"] = tuple(int(s) for s in eval_raw["seeds"])
    if eval_raw.get("reference") is not None:
        eval_raw["reference"] = _resolve(base, eval_raw["reference"])

    config = ProjectConfig(
        objects=tuple(objects),
        output_dir=output_dir_override or _resolve(base, str(raw["output_dir"])),
        seed=int(seed_override if seed_override is not None else raw.get("seed", 0)),
        finetune=_build_section(FinetuneSettings, dict(raw.get("finetune", {})), "finetune"),
        init=_build_section(InitSettings, dict(raw.get("init", {})), "init"),
        eval=_build_section(EvalSettings, eval_raw, "eval"),
        backend=_build_section(BackendConfig, dict(raw.get("backend", {})), "backend"),
    )
    _validate(config)
    return config


def save_config(path, config: ProjectConfig) -> None:
    payload = config.to_dict()
    payload["objects"] = [asdict(o) for o in config.objects]
    payload["eval"]["prompts"] = list(config.eval.prompts)
    payload["eval"]["seeds"] = list(config.eval.seeds)
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")
