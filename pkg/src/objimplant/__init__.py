"""One-shot object implantation for a toy latent diffusion model.

Given a single image, a binary object mask, and a class name, the
pipeline reserves learnable identifier tokens, warm-starts them against
a fused image/mask/class prototype, then jointly fine-tunes the prompt
rows and low-rank cross-attention adapters with an object-masked
denoising objective.  Everything runs in float64 on CPU and is
deterministic given a seed.
"""

from .archive import ArchiveError, ArchiveIntegrityError, load_archive, save_archive
from .backend import BackendConfig, ToyBackend, ToyCodec, ToyDenoiser, pretrain_backend
from .class_reg import class_alignment_loss, class_gate, gated_class_loss
from .config import (
    ConfigError,
    EvalSettings,
    FinetuneSettings,
    InitSettings,
    ObjectConfig,
    ProjectConfig,
    load_config,
    save_config,
)
from .diffusion import NoiseSchedule, add_noise, ddim_sample, ddim_timesteps, guided_eps_model
from .encoders import (
    MultimodalEncoders,
    ToyImageEncoder,
    ToyTextEncoder,
    UnknownIdentifierError,
    Vocabulary,
    build_encoders,
    detokenize,
    load_image,
    load_mask,
    save_image,
    tokenize,
)
from .evalkit import (
    MetricReport,
    image_alignment,
    kid,
    kid_subset_averaged,
    make_toy_extractor,
    polynomial_kernel,
    register_extractor,
    text_alignment,
)
from .lora import LoRAAdapter, LoRALinear, adapter_state, inject_adapters, load_adapter_state
from .masked_loss import (
    MaskVanishedError,
    choose_subset,
    denoising_loss,
    latent_mask,
    mask_latent,
    masked_eps_target,
    object_masked_loss,
    object_subsets,
)
from .proto_embed import PrototypeFitResult, fit_prompt_embedding, fuse_prototype, prototype_target
from .trainer import (
    FinetuneSession,
    ImplantedModel,
    LoadedObject,
    TrainStepRecord,
    initialize_embeddings,
    load_bundle,
    load_objects,
)
from .util import seeded_rng

__version__ = "0.1.0"

__all__ = [
    "ArchiveError",
    "ArchiveIntegrityError",
    "BackendConfig",
    "ConfigError",
    "EvalSettings",
    "FinetuneSession",
    "FinetuneSettings",
    "ImplantedModel",
    "InitSettings",
    "LoRAAdapter",
    "LoRALinear",
    "LoadedObject",
    "MaskVanishedError",
    "MetricReport",
    "MultimodalEncoders",
    "NoiseSchedule",
    "ObjectConfig",
    "ProjectConfig",
    "PrototypeFitResult",
    "ToyBackend",
    "ToyCodec",
    "ToyDenoiser",
    "ToyImageEncoder",
    "ToyTextEncoder",
    "TrainStepRecord",
    "UnknownIdentifierError",
    "Vocabulary",
    "add_noise",
    "adapter_state",
    "build_encoders",
    "choose_subset",
    "class_alignment_loss",
    "class_gate",
    "ddim_sample",
    "ddim_timesteps",
    "denoising_loss",
    "detokenize",
    "fit_prompt_embedding",
    "fuse_prototype",
    "gated_class_loss",
    "guided_eps_model",
    "image_alignment",
    "initialize_embeddings",
    "inject_adapters",
    "kid",
    "kid_subset_averaged",
    "latent_mask",
    "load_adapter_state",
    "load_archive",
    "load_bundle",
    "load_config",
    "load_image",
    "load_mask",
    "load_objects",
    "make_toy_extractor",
    "mask_latent",
    "masked_eps_target",
    "object_masked_loss",
    "object_subsets",
    "polynomial_kernel",
    "pretrain_backend",
    "prototype_target",
    "register_extractor",
    "save_archive",
    "save_config",
    "save_image",
    "seeded_rng",
    "text_alignment",
    "tokenize",
]
