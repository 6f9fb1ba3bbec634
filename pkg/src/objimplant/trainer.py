"""One-shot fine-tuning loop, checkpointing, and artifact bundles.

A session owns its own copy of the denoiser (the backend stays frozen
and shareable), injects low-rank adapters into the cross-attention
projections, and jointly trains those factors with the identifier
embedding rows.  Each step draws timestep, noise, regularizer gate, and
object subset from four purpose-split generator streams, which is what
makes checkpoint/resume bitwise-equivalent to an uninterrupted run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .archive import load_archive, save_archive
from .backend import NULL_PROMPT, BackendConfig, ToyBackend, ToyDenoiser, pretrain_backend
from .class_reg import class_gate, gated_class_loss
from .config import ConfigError, FinetuneSettings, InitSettings, ProjectConfig, save_config
from .diffusion import add_noise, ddim_sample, guided_eps_model
from .encoders import TextEmbedding, load_image, load_mask, tokenize
from .lora import adapter_parameters, adapter_state, inject_adapters, load_adapter_state
from .masked_loss import (
    choose_subset,
    denoising_loss,
    latent_mask,
    mask_latent,
    object_masked_loss,
    object_subsets,
)
from .proto_embed import PROMPT_TEMPLATE, PrototypeFitResult, fit_prompt_embedding
from .util import DTYPE, normal_tensor, restore_rng, rng_state, seeded_rng

OBJECT_PROMPT_TEMPLATE = "a photo of {identifier} {class_name}"
TEXT_ADAPTER_PREFIX = "text."


@dataclass
class LoadedObject:
    identifier: str
    class_name: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) binary


def load_objects(config: ProjectConfig) -> list[LoadedObject]:
    return [
        LoadedObject(
            identifier=o.identifier,
            class_name=o.class_name,
            image=load_image(o.image_path),
            mask=load_mask(o.mask_path),
        )
        for o in config.objects
    ]


def object_prompt(obj: LoadedObject) -> str:
    return OBJECT_PROMPT_TEMPLATE.format(identifier=obj.identifier, class_name=obj.class_name)


def global_prompt(objects: list[LoadedObject]) -> str:
    return PROMPT_TEMPLATE.format(identifier=" and ".join(o.identifier for o in objects))


def initialize_embeddings(
    backend: ToyBackend,
    objects: list[LoadedObject],
    settings: InitSettings,
    n_tokens: int,
    seed: int,
) -> dict[str, PrototypeFitResult]:
    """Stage 1: reserve identifier rows and fit each against its prototype.

    Each object gets its own generator stream keyed by identifier, so
    reordering the object list permutes results without changing them.
    """
    results: dict[str, PrototypeFitResult] = {}
    for obj in objects:
        backend.vocabulary.reserve_identifier(obj.identifier, n_tokens)
        results[obj.identifier] = fit_prompt_embedding(
            backend.encoders,
            obj.identifier,
            obj.image,
            obj.mask,
            obj.class_name,
            seeded_rng(seed, "proto", obj.identifier),
            max_steps=settings.max_steps,
            lr=settings.lr,
            tol=settings.tol,
            patience=settings.patience,
        )
    return results


def save_embeddings(path, results: dict[str, PrototypeFitResult], seed: int) -> None:
    entries = {f"prompt_embedding/{ident}": r.rows for ident, r in results.items()}
    meta = {
        "kind": "embeddings",
        "identifiers": list(results),
        "losses": {ident: r.loss for ident, r in results.items()},
        "steps": {ident: r.steps for ident, r in results.items()},
        "seed": seed,
    }
    save_archive(path, entries, meta)


def load_embeddings(path) -> tuple[dict[str, torch.Tensor], dict]:
    entries, meta = load_archive(path)
    if meta.get("kind") != "embeddings":
        raise ValueError(f"{path} is not an embedding archive")
    rows = {ident: entries[f"prompt_embedding/{ident}"] for ident in meta["identifiers"]}
    return rows, meta


@dataclass
class TrainStepRecord:
    step: int
    ts: list[int]  # sampled timestep per batch item
    subset: list[int]  # object indices trained this step
    gate: bool  # class regularizer active
    loss_masked: float
    loss_global: float
    loss_class: float
    loss_total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class FinetuneSession:
    """Joint optimization of identifier rows and adapter factors."""

    def __init__(
        self,
        backend: ToyBackend,
        objects: list[LoadedObject],
        settings: FinetuneSettings,
        seed: int,
        initial_rows: dict[str, torch.Tensor],
        train_hash: str = "",
    ):
        if not objects:
            raise ValueError("need at least one object")
        if settings.steps < 1:
            raise ValueError(f"step budget must be >= 1, got {settings.steps}")
        backend.freeze()
        self.backend = backend
        self.objects = list(objects)
        self.settings = settings
        self.seed = seed
        self.train_hash = train_hash

        vocab = backend.vocabulary
        for obj in self.objects:
            if obj.identifier not in vocab.identifier_groups:
                raise ValueError(
                    f"identifier {obj.identifier!r} has no reserved rows; run embedding initialization first"
                )

        # the backend stays pristine: adapters go into a private copy
        self.denoiser = copy.deepcopy(backend.denoiser)
        self.text = copy.deepcopy(backend.encoders.text) if settings.adapt_text_encoder else backend.encoders.text
        self.schedule = backend.schedule

        first = self.objects[0].image
        for obj in self.objects[1:]:
            if obj.image.shape != first.shape or not np.array_equal(obj.image, first):
                raise ValueError("joint fine-tuning requires every object to share one training image")
        self.z0 = backend.image_to_latent(first)
        self.latent_masks = [latent_mask(obj.mask, backend.latent_hw) for obj in self.objects]

        self.rows: dict[str, torch.Tensor] = {}
        for obj in self.objects:
            init = initial_rows[obj.identifier]
            expected = (len(vocab.identifier_groups[obj.identifier]), backend.encoders.embedding_dim)
            if tuple(init.shape) != expected:
                raise ValueError(
                    f"rows for {obj.identifier!r} have shape {tuple(init.shape)}, expected {expected}"
                )
            self.rows[obj.identifier] = init.detach().clone().requires_grad_(True)

        lora_rng = seeded_rng(seed, "lora")
        self.adapters = inject_adapters(
            self.denoiser,
            ToyDenoiser.CROSS_ATTENTION_PROJECTIONS,
            settings.lora_rank,
            settings.lora_scale,
            lora_rng,
        )
        self.text_adapters = {}
        if settings.adapt_text_encoder:
            targets = [
                f"layers.{i}.{p}" for i in range(len(self.text.layers)) for p in ("q", "k", "v", "o")
            ]
            self.text_adapters = inject_adapters(
                self.text, targets, settings.lora_rank, settings.lora_scale, lora_rng
            )

        self._params = [self.rows[o.identifier] for o in self.objects]
        self._params += adapter_parameters(self.adapters)
        self._params += adapter_parameters(self.text_adapters)
        self.optimizer = torch.optim.Adam(self._params, lr=settings.lr)

        self.rng_t = seeded_rng(seed, "t")
        self.rng_eps = seeded_rng(seed, "eps")
        self.rng_gate = seeded_rng(seed, "gate")
        self.rng_subset = seeded_rng(seed, "subset")

        self.subsets = object_subsets(len(self.objects), settings.subset_size)
        self.object_indices = [tokenize(object_prompt(o), vocab) for o in self.objects]
        self.global_indices = tokenize(global_prompt(self.objects), vocab)

        self.step_index = 0
        self.records: list[TrainStepRecord] = []

    def _rows_override(self) -> dict[int, torch.Tensor]:
        override: dict[int, torch.Tensor] = {}
        groups = self.backend.vocabulary.identifier_groups
        for obj in self.objects:
            for k, idx in enumerate(groups[obj.identifier]):
                override[idx] = self.rows[obj.identifier][k]
        return override

    def _predict(self, z: torch.Tensor, t: int, context: torch.Tensor) -> torch.Tensor:
        t_idx = torch.tensor([self.schedule.validate_t(t)], dtype=torch.long)
        return self.denoiser(z[None], t_idx, context[None])[0]

    def compute_loss(
        self,
        ts: list[int],
        epss: list[torch.Tensor],
        subset: tuple[int, ...],
        gate: bool,
    ) -> tuple[torch.Tensor, dict[str, float]]:
        """Full objective for a fixed draw of (t, eps, subset, gate).

        Separated from :meth:`step` so gradient checks and tests can
        evaluate the loss surface at chosen randomness.
        """
        override = self._rows_override()
        contexts = {i: self.text.encode(self.object_indices[i], override).sequence for i in subset}
        global_ctx = self.text.encode(self.global_indices, override).sequence

        masked_total = torch.zeros((), dtype=DTYPE)
        global_total = torch.zeros((), dtype=DTYPE)
        for t, eps in zip(ts, epss):
            for i in subset:
                z0_masked = mask_latent(self.z0, self.latent_masks[i])
                zt_masked = add_noise(self.schedule, z0_masked, t, eps)
                pred = self._predict(zt_masked, t, contexts[i])
                masked_total = masked_total + object_masked_loss(eps, pred, self.latent_masks[i])
            zt = add_noise(self.schedule, self.z0, t, eps)
            global_total = global_total + denoising_loss(eps, self._predict(zt, t, global_ctx))
        masked_total = masked_total / len(ts)
        global_total = global_total / len(ts)

        class_total = torch.zeros((), dtype=DTYPE)
        for obj in self.objects:
            class_total = class_total + gated_class_loss(
                self.text, obj.identifier, self.rows[obj.identifier], obj.class_name, gate, self.settings.alpha_cl
            )

        total = masked_total + global_total + class_total
        parts = {
            "loss_masked": float(masked_total.detach()),
            "loss_global": float(global_total.detach()),
            "loss_class": float(class_total.detach()),
        }
        return total, parts

    def draw_step_randomness(self) -> tuple[list[int], list[torch.Tensor], bool, tuple[int, ...]]:
        s = self.settings
        ts = [int(self.rng_t.integers(self.schedule.num_steps)) for _ in range(s.batch_size)]
        epss = [normal_tensor(self.rng_eps, *self.z0.shape) for _ in range(s.batch_size)]
        gate = class_gate(self.rng_gate, s.p_cl)
        subset = choose_subset(self.subsets, self.rng_subset, step=self.step_index, strategy=s.subset_strategy)
        return ts, epss, gate, subset

    def step(self) -> TrainStepRecord:
        ts, epss, gate, subset = self.draw_step_randomness()
        self.optimizer.zero_grad()
        total, parts = self.compute_loss(ts, epss, subset, gate)
        total.backward()
        self.optimizer.step()
        record = TrainStepRecord(
            step=self.step_index,
            ts=ts,
            subset=list(subset),
            gate=gate,
            loss_total=float(total.detach()),
            **parts,
        )
        self.step_index += 1
        self.records.append(record)
        return record

    def run(self, total_steps: int | None = None, log_path=None) -> list[TrainStepRecord]:
        """Advance to ``total_steps`` (default: the configured budget).

        The target is an absolute step count, so running a restored
        checkpoint continues where it stopped instead of starting over.
        """
        target = self.settings.steps if total_steps is None else total_steps
        if target < 1:
            raise ValueError(f"step budget must be >= 1, got {target}")
        new_records: list[TrainStepRecord] = []
        log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
        try:
            while self.step_index < target:
                record = self.step()
                new_records.append(record)
                if log_file is not None:
                    log_file.write(record.to_json() + "\n")
        finally:
            if log_file is not None:
                log_file.close()
        return new_records

    # -- persistence ---------------------------------------------------

    def _adapter_entries(self) -> dict[str, torch.Tensor]:
        entries = adapter_state(self.adapters)
        for key, value in adapter_state(self.text_adapters).items():
            entries["lora/" + TEXT_ADAPTER_PREFIX + key[len("lora/") :]] = value
        return entries

    def _row_entries(self) -> dict[str, torch.Tensor]:
        return {f"prompt_embedding/{o.identifier}": self.rows[o.identifier].detach().clone() for o in self.objects}

    def _rng_map(self) -> dict[str, np.random.Generator]:
        return {"t": self.rng_t, "eps": self.rng_eps, "gate": self.rng_gate, "subset": self.rng_subset}

    def save_checkpoint(self, path) -> None:
        entries = self._row_entries()
        entries.update(self._adapter_entries())
        optim_steps: list[float] = []
        for i, param in enumerate(self._params):
            state = self.optimizer.state.get(param, {})
            if state:
                entries[f"optim/{i}/exp_avg"] = state["exp_avg"].detach().clone()
                entries[f"optim/{i}/exp_avg_sq"] = state["exp_avg_sq"].detach().clone()
                optim_steps.append(float(state["step"]))
            else:
                optim_steps.append(-1.0)  # param not yet visited by the optimizer
        meta = {
            "kind": "checkpoint",
            "step": self.step_index,
            "train_hash": self.train_hash,
            "optim_steps": optim_steps,
            "rng": {name: rng_state(rng) for name, rng in self._rng_map().items()},
            "identifiers": [o.identifier for o in self.objects],
        }
        save_archive(path, entries, meta)

    def restore_checkpoint(self, path) -> None:
        entries, meta = load_archive(path)
        if meta.get("kind") != "checkpoint":
            raise ValueError(f"{path} is not a training checkpoint")
        if meta["train_hash"] != self.train_hash:
            raise ConfigError(
                "checkpoint was written under a different training configuration (config hash mismatch)"
            )
        with torch.no_grad():
            for obj in self.objects:
                self.rows[obj.identifier].copy_(entries[f"prompt_embedding/{obj.identifier}"])
            load_adapter_state(self.adapters, entries)
            if self.text_adapters:
                text_entries = {
                    key.replace("lora/" + TEXT_ADAPTER_PREFIX, "lora/", 1): value
                    for key, value in entries.items()
                    if key.startswith("lora/" + TEXT_ADAPTER_PREFIX)
                }
                load_adapter_state(self.text_adapters, text_entries)
        for i, param in enumerate(self._params):
            step_count = meta["optim_steps"][i]
            if step_count >= 0:
                self.optimizer.state[param] = {
                    "step": torch.tensor(float(step_count)),
                    "exp_avg": entries[f"optim/{i}/exp_avg"].clone(),
                    "exp_avg_sq": entries[f"optim/{i}/exp_avg_sq"].clone(),
                }
            else:
                self.optimizer.state.pop(param, None)
        self.rng_t = restore_rng(meta["rng"]["t"])
        self.rng_eps = restore_rng(meta["rng"]["eps"])
        self.rng_gate = restore_rng(meta["rng"]["gate"])
        self.rng_subset = restore_rng(meta["rng"]["subset"])
        self.step_index = int(meta["step"])
        self.records = []

    def export_bundle(self, bundle_dir, config: ProjectConfig | None = None) -> Path:
        """Write the artifact bundle: archive, manifest, config snapshot, vocabulary."""
        bundle_dir = Path(bundle_dir)
        bundle_dir.mkdir(parents=True, exist_ok=True)
        entries = self._row_entries()
        entries.update(self._adapter_entries())
        adapter_targets = sorted(self.adapters) + [
            TEXT_ADAPTER_PREFIX + path for path in sorted(self.text_adapters)
        ]
        groups = self.backend.vocabulary.identifier_groups
        meta = {
            "kind": "bundle",
            "identifiers": [o.identifier for o in self.objects],
            "class_names": {o.identifier: o.class_name for o in self.objects},
            "n_tokens": {o.identifier: len(groups[o.identifier]) for o in self.objects},
            "adapter_targets": adapter_targets,
            "lora_rank": self.settings.lora_rank,
            "lora_scale": self.settings.lora_scale,
            "steps_trained": self.step_index,
            "train_hash": self.train_hash,
        }
        save_archive(bundle_dir / "bundle.ntar", entries, meta)
        manifest = {
            "identifiers": meta["identifiers"],
            "adapter_targets": adapter_targets,
            "entries": sorted(entries),
            "steps_trained": self.step_index,
            "train_hash": self.train_hash,
        }
        (bundle_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if config is not None:
            save_config(bundle_dir / "config.yaml", config)
        self.backend.vocabulary.save(bundle_dir / "vocabulary.txt")
        return bundle_dir

    def as_model(self) -> "ImplantedModel":
        rows = {o.identifier: self.rows[o.identifier].detach().clone() for o in self.objects}
        return ImplantedModel(self.backend, self.denoiser, self.text, rows)


class ImplantedModel:
    """Fine-tuned denoiser + identifier rows bound to a frozen backend."""

    def __init__(self, backend: ToyBackend, denoiser, text, rows: dict[str, torch.Tensor]):
        self.backend = backend
        self.denoiser = denoiser
        self.text = text
        self.rows = rows

    def _override(self) -> dict[int, torch.Tensor]:
        override: dict[int, torch.Tensor] = {}
        groups = self.backend.vocabulary.identifier_groups
        for ident, rows in self.rows.items():
            for k, idx in enumerate(groups[ident]):
                override[idx] = rows[k]
        return override

    def context(self, prompt: str) -> TextEmbedding:
        indices = tokenize(prompt, self.backend.vocabulary)
        return self.text.encode(indices, rows_override=self._override())

    def eps_model(self, context: TextEmbedding):
        def predict(z: torch.Tensor, t: int) -> torch.Tensor:
            t_idx = torch.tensor([self.backend.schedule.validate_t(t)], dtype=torch.long)
            return self.denoiser(z[None], t_idx, context.sequence[None])[0]

        return predict

    def generate_latent(
        self,
        prompt: str,
        rng: np.random.Generator | None = None,
        z_init: torch.Tensor | None = None,
        num_sample_steps: int = 25,
        guidance_scale: float = 1.0,
    ) -> torch.Tensor:
        if z_init is None:
            if rng is None:
                raise ValueError("pass either an initial latent or a generator")
            c, (h, w) = self.backend.config.latent_channels, self.backend.latent_hw
            z_init = normal_tensor(rng, c, h, w)
        model = self.eps_model(self.context(prompt))
        if guidance_scale != 1.0:
            null_ctx = self.text.encode(tokenize(NULL_PROMPT, self.backend.vocabulary))
            model = guided_eps_model(model, self.eps_model(null_ctx), guidance_scale)
        with torch.no_grad():
            return ddim_sample(model, self.backend.schedule, z_init, num_sample_steps)

    def generate_image(self, prompt: str, **kwargs) -> np.ndarray:
        return self.backend.latent_to_image(self.generate_latent(prompt, **kwargs))


def load_bundle(bundle_dir, backend: ToyBackend | None = None) -> ImplantedModel:
    """Rehydrate an exported bundle onto a (cached) pretrained backend."""
    bundle_dir = Path(bundle_dir)
    archive_path = bundle_dir / "bundle.ntar"
    if not archive_path.is_file():
        raise FileNotFoundError(f"bundle archive missing: {archive_path}")
    entries, meta = load_archive(archive_path)
    if meta.get("kind") != "bundle":
        raise ValueError(f"{archive_path} is not an artifact bundle")

    if backend is None:
        snapshot = bundle_dir / "config.yaml"
        backend_cfg = BackendConfig()
        if snapshot.is_file():
            raw = yaml.safe_load(snapshot.read_text(encoding="utf-8")) or {}
            backend_cfg = BackendConfig(**raw.get("backend", {}))
        backend = pretrain_backend(backend_cfg)

    for ident in meta["identifiers"]:
        backend.vocabulary.reserve_identifier(ident, meta["n_tokens"][ident])

    denoiser = copy.deepcopy(backend.denoiser)
    denoiser_targets = [t for t in meta["adapter_targets"] if not t.startswith(TEXT_ADAPTER_PREFIX)]
    adapters = inject_adapters(
        denoiser, denoiser_targets, meta["lora_rank"], meta["lora_scale"], seeded_rng(0, "lora-load")
    )
    load_adapter_state(adapters, entries)

    text = backend.encoders.text
    text_targets = [
        t[len(TEXT_ADAPTER_PREFIX) :] for t in meta["adapter_targets"] if t.startswith(TEXT_ADAPTER_PREFIX)
    ]
    if text_targets:
        text = copy.deepcopy(text)
        text_adapters = inject_adapters(
            text, text_targets, meta["lora_rank"], meta["lora_scale"], seeded_rng(0, "lora-load-text")
        )
        renamed = {
            key.replace("lora/" + TEXT_ADAPTER_PREFIX, "lora/", 1): value
            for key, value in entries.items()
            if key.startswith("lora/" + TEXT_ADAPTER_PREFIX)
        }
        load_adapter_state(text_adapters, renamed)

    rows = {ident: entries[f"prompt_embedding/{ident}"] for ident in meta["identifiers"]}
    return ImplantedModel(backend, denoiser, text, rows)
