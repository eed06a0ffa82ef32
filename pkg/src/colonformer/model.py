"""ColonFormer assembly, named model variants and checkpoint I/O.

Checkpoints are safetensors files: a flat ``name -> tensor`` map using the
module paths of :class:`ColonFormer` (``encoder.*``, ``decoder.*``,
``refinement.*``) plus string metadata (variant name, config hash).
"""

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file, safe_open

from .decoder import PPMConfig, UPerDecoder, resize
from .encoder import VARIANTS as BACKBONES, MiTEncoder
from .refinement import RefinementModule


@dataclass(frozen=True)
class ModelVariant:
    name: str
    backbone: str
    decoder_channels: int = 128
    head_width: int = 32
    pooling_bins: tuple = (1, 2, 3, 6)


MODEL_VARIANTS = {
    "XS": ModelVariant("XS", "B1"),
    "S": ModelVariant("S", "B2"),
    "L": ModelVariant("L", "B3"),
    "XL": ModelVariant("XL", "B4"),
    "XXL": ModelVariant("XXL", "B5"),
    # bins sized for 64x64 (T) and 32x32 (G) inputs
    "T": ModelVariant("T", "T", decoder_channels=16, head_width=8, pooling_bins=(1, 2)),
    "G": ModelVariant("G", "G", decoder_channels=8, head_width=4, pooling_bins=(1,)),
}


def get_variant(name):
    if isinstance(name, ModelVariant):
        return name
    try:
        return MODEL_VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(MODEL_VARIANTS)}") from None


class ColonFormer(nn.Module):
    """Encoder -> UPer decoder (global map) -> three RA-RA refinement stages."""

    def __init__(self, variant="S", use_axial=True, positional_bias=0):
        super().__init__()
        self.variant = get_variant(variant)
        backbone = BACKBONES[self.variant.backbone]
        self.encoder = MiTEncoder(backbone)
        v = self.variant
        self.decoder = UPerDecoder(backbone.channels, v.decoder_channels, PPMConfig(v.pooling_bins, v.decoder_channels))
        self.refinement = RefinementModule(
            backbone.channels[1:], self.variant.head_width, use_axial=use_axial, positional_bias=positional_bias
        )

    def forward(self, x):
        """Return the prediction set ``[global, refine@1/32, refine@1/16, refine@1/8]`` as logits."""
        feats = self.encoder(x)
        return self.refinement(feats, self.decoder(feats))

    @torch.no_grad()
    def predict_logits(self, x):
        """Final refined map, resized to the input resolution."""
        return resize(self(x)[-1], x.shape[-2:])


def build_model(variant="S", seed=None, **kwargs):
    if seed is not None:
        torch.manual_seed(seed)
    return ColonFormer(variant, **kwargs)


def count_parameters(model_or_variant):
    model = model_or_variant if isinstance(model_or_variant, nn.Module) else ColonFormer(model_or_variant)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(model, path, metadata=None):
    meta = {"variant": model.variant.name}
    meta.update({k: str(v) for k, v in (metadata or {}).items()})
    state = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(state, str(path), metadata=meta)
    return Path(path)


def read_metadata(path):
    with safe_open(str(path), framework="pt") as f:
        return dict(f.metadata() or {})


class CheckpointMismatch(ValueError):
    pass


def load_state(module, state, strict=True, prefix=""):
    """Copy matching tensors from ``state`` into ``module``.

    Returns ``(missing, unexpected)`` name lists. With ``strict`` any mismatch
    raises :class:`CheckpointMismatch`.
    """
    own = module.state_dict()
    if prefix:
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    unexpected = sorted(k for k in state if k not in own or own[k].shape != state[k].shape)
    matched = {k: v for k, v in state.items() if k not in unexpected}
    missing = sorted(k for k in own if k not in matched)
    if strict and (missing or unexpected):
        raise CheckpointMismatch(
            f"unmatched parameters: {len(missing)} missing (e.g. {missing[:3]}), "
            f"{len(unexpected)} unexpected (e.g. {unexpected[:3]})"
        )
    module.load_state_dict(matched, strict=False)
    return missing, unexpected


def load_checkpoint(path, model=None):
    """Rebuild (or fill) a model from a checkpoint written by :func:`save_checkpoint`.

    The model is returned in eval mode; call ``.train()`` to resume training.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = read_metadata(path)
    if model is None:
        model = ColonFormer(meta.get("variant", "S"))
    load_state(model, load_file(str(path)), strict=True)
    return model.eval()


def load_pretrained_backbone(model, path):
    """Load encoder weights from a backbone-only file; tolerant of partial matches.

    Keys may be bare encoder names or carry an ``encoder.`` prefix. Returns
    ``(missing, unexpected)`` for reporting.
    """
    path = str(path)
    state = load_file(path) if path.endswith(".safetensors") else torch.load(path, map_location="cpu")
    if any(k.startswith("encoder.") for k in state):
        return load_state(model.encoder, state, strict=False, prefix="encoder.")
    return load_state(model.encoder, state, strict=False)
