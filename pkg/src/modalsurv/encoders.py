"""Toy-scale modality encoders and projection heads.

CT and PET volumes go through a small vision transformer over 3-D patches;
expression vectors go through a fully connected net. Each latent is then
mapped by a bias-free linear head onto the unit sphere.

Parameters live in a flat ``dict`` keyed by dotted names (``"ct.patch.w"``)
so they serialize directly into checkpoints.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DimensionMismatchError, ZeroNormError
from .tensor import Tensor, as_tensor, l2_normalize_rows, layer_norm

MODALITIES = ("ct", "pet", "rna")
VOLUME_MODALITIES = ("ct", "pet")
MAX_RNA_HIDDEN_LAYERS = 6


@dataclass
class EncoderConfig:
    volume_shape: tuple[int, int, int] = (16, 64, 64)
    volume_patch_size: tuple[int, int, int] = (4, 16, 16)
    transformer_blocks: int = 2
    model_width: int = 64
    num_heads: int = 4
    mlp_ratio: int = 2
    gene_count: int = 256
    rna_hidden_layers: tuple[int, ...] = (64, 64)
    projection_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.volume_patch_size = tuple(int(s) for s in self.volume_patch_size)
        self.rna_hidden_layers = tuple(int(s) for s in self.rna_hidden_layers)
        if len(self.volume_shape) != 3 or len(self.volume_patch_size) != 3:
            raise ValueError("volume shape and patch size need three axes")
        if any(p <= 0 for p in self.volume_patch_size) or any(s <= 0 for s in self.volume_shape):
            raise ValueError("volume shape and patch size must be positive")
        if any(s % p for s, p in zip(self.volume_shape, self.volume_patch_size)):
            raise ValueError(
                f"volume shape {self.volume_shape} is not divisible by patch {self.volume_patch_size}"
            )
        if self.transformer_blocks < 0:
            raise ValueError("transformer_blocks must be nonnegative")
        if self.model_width <= 0 or self.model_width % self.num_heads:
            raise ValueError("model_width must be positive and divisible by num_heads")
        if len(self.rna_hidden_layers) > MAX_RNA_HIDDEN_LAYERS:
            raise ValueError(f"at most {MAX_RNA_HIDDEN_LAYERS} hidden layers for the expression net")
        if self.projection_dim <= 0 or self.gene_count <= 0:
            raise ValueError("projection_dim and gene_count must be positive")

    @property
    def num_patches(self) -> int:
        return int(np.prod([s // p for s, p in zip(self.volume_shape, self.volume_patch_size)]))

    @property
    def patch_volume(self) -> int:
        return int(np.prod(self.volume_patch_size))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# initialization --------------------------------------------------------------


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_volume(cfg: EncoderConfig, prefix: str, rng, dtype) -> dict:
    w = cfg.model_width
    params = {
        f"{prefix}.patch.w": _uniform(rng, cfg.patch_volume, (cfg.patch_volume, w), dtype),
        f"{prefix}.patch.b": np.zeros(w, dtype),
        f"{prefix}.pos": (0.02 * rng.standard_normal((cfg.num_patches, w))).astype(dtype),
    }
    hidden = cfg.mlp_ratio * w
    for i in range(cfg.transformer_blocks):
        b = f"{prefix}.block{i}"
        params.update({
            f"{b}.ln1.g": np.ones(w, dtype),
            f"{b}.ln1.b": np.zeros(w, dtype),
            f"{b}.qkv.w": _uniform(rng, w, (w, 3 * w), dtype),
            f"{b}.qkv.b": np.zeros(3 * w, dtype),
            f"{b}.out.w": _uniform(rng, w, (w, w), dtype),
            f"{b}.out.b": np.zeros(w, dtype),
            f"{b}.ln2.g": np.ones(w, dtype),
            f"{b}.ln2.b": np.zeros(w, dtype),
            f"{b}.mlp1.w": _uniform(rng, w, (w, hidden), dtype),
            f"{b}.mlp1.b": np.zeros(hidden, dtype),
            f"{b}.mlp2.w": _uniform(rng, hidden, (hidden, w), dtype),
            f"{b}.mlp2.b": np.zeros(w, dtype),
        })
    params[f"{prefix}.final.w"] = _uniform(rng, w, (w, w), dtype)
    params[f"{prefix}.final.b"] = np.zeros(w, dtype)
    return params


def _init_expression(cfg: EncoderConfig, rng, dtype) -> dict:
    params = {}
    widths = [cfg.gene_count, *cfg.rna_hidden_layers, cfg.model_width]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"rna.fc{i}.w"] = _uniform(rng, fan_in, (fan_in, fan_out), dtype)
        params[f"rna.fc{i}.b"] = np.zeros(fan_out, dtype)
    return params


def init_encoder_params(cfg: EncoderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded fan-in-scaled uniform initialization for all encoders and heads.

    CT and PET share architecture but draw independent weights.
    """
    params = {}
    params.update(_init_volume(cfg, "ct", np.random.default_rng([cfg.seed, 0]), dtype))
    params.update(_init_volume(cfg, "pet", np.random.default_rng([cfg.seed, 1]), dtype))
    params.update(_init_expression(cfg, np.random.default_rng([cfg.seed, 2]), dtype))
    rng = np.random.default_rng([cfg.seed, 3])
    for m in MODALITIES:
        params[f"proj.{m}.w"] = _uniform(rng, cfg.model_width, (cfg.model_width, cfg.projection_dim), dtype)
    return params


# forward passes --------------------------------------------------------------


def patchify(volumes: np.ndarray, patch: tuple[int, int, int]) -> np.ndarray:
    """Split ``(B, D, H, W)`` volumes into ``(B, n_patches, pd*ph*pw)`` tokens."""
    b, d, h, w = volumes.shape
    pd, ph, pw = patch
    if d % pd or h % ph or w % pw:
        raise DimensionMismatchError(f"volume {volumes.shape[1:]} not divisible by patch {patch}")
    x = volumes.reshape(b, d // pd, pd, h // ph, ph, w // pw, pw)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, -1, pd * ph * pw)


def _attention(x, params, b, num_heads):
    bsz, n, w = x.shape
    dh = w // num_heads
    qkv = x @ params[f"{b}.qkv.w"] + params[f"{b}.qkv.b"]
    qkv = qkv.reshape(bsz, n, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = scores.softmax(axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, n, w)
    return out @ params[f"{b}.out.w"] + params[f"{b}.out.b"]


def encode_volume(volume, params, cfg: EncoderConfig, prefix: str = "ct") -> Tensor:
    """Encode one ``(D, H, W)`` volume or a ``(B, D, H, W)`` batch.

    Returns a tensor of shape ``(model_width,)`` or ``(B, model_width)``.
    With zero transformer blocks this reduces to a mean-pooled linear patch
    embedding followed by the final linear layer.
    """
    vol = np.asarray(volume.data if isinstance(volume, Tensor) else volume)
    single = vol.ndim == 3
    if single:
        vol = vol[None]
    if vol.ndim != 4 or tuple(vol.shape[1:]) != cfg.volume_shape:
        raise DimensionMismatchError(
            f"volume shape {vol.shape[1:]} does not match configured {cfg.volume_shape}"
        )
    p = {k: as_tensor(v) for k, v in params.items() if k.startswith(prefix + ".")}
    dtype = p[f"{prefix}.patch.w"].dtype
    tokens = Tensor(patchify(vol.astype(dtype, copy=False), cfg.volume_patch_size))
    x = tokens @ p[f"{prefix}.patch.w"] + p[f"{prefix}.patch.b"] + p[f"{prefix}.pos"]
    for i in range(cfg.transformer_blocks):
        b = f"{prefix}.block{i}"
        x = x + _attention(layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"]), p, b, cfg.num_heads)
        h = layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        h = (h @ p[f"{b}.mlp1.w"] + p[f"{b}.mlp1.b"]).gelu()
        x = x + h @ p[f"{b}.mlp2.w"] + p[f"{b}.mlp2.b"]
    pooled = x.mean(axis=1)
    out = pooled @ p[f"{prefix}.final.w"] + p[f"{prefix}.final.b"]
    return out[0] if single else out


def encode_expression(x, params, cfg: EncoderConfig) -> Tensor:
    """Fully connected expression encoder; tanh between layers, linear output."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.shape[-1] != cfg.gene_count:
        raise DimensionMismatchError(f"expected {cfg.gene_count} genes, got {arr.shape[-1]}")
    n_layers = len(cfg.rna_hidden_layers) + 1
    h = Tensor(arr.astype(as_tensor(params["rna.fc0.w"]).dtype, copy=False))
    for i in range(n_layers):
        h = h @ as_tensor(params[f"rna.fc{i}.w"]) + as_tensor(params[f"rna.fc{i}.b"])
        if i < n_layers - 1:
            h = h.tanh()
    return h[0] if single else h


def project(latent, weight) -> Tensor:
    """Bias-free linear projection followed by L2 normalization.

    Accepts a single latent ``(width,)`` or a batch ``(B, width)``.
    """
    latent = as_tensor(latent)
    weight = as_tensor(weight)
    if latent.shape[-1] != weight.shape[0]:
        raise DimensionMismatchError(
            f"latent width {latent.shape[-1]} does not match projection input {weight.shape[0]}"
        )
    z = latent @ weight
    if np.any(np.linalg.norm(z.data, axis=-1) == 0):
        raise ZeroNormError("projected embedding has zero norm")
    return l2_normalize_rows(z)


@dataclass
class EmbeddingTriplet:
    t: np.ndarray
    p: np.ndarray
    r: np.ndarray


@dataclass
class ProjectedTriplet:
    t_tilde: np.ndarray
    p_tilde: np.ndarray
    r_tilde: np.ndarray
    flags: dict = field(default_factory=dict)

    def as_tuple(self):
        return self.t_tilde, self.p_tilde, self.r_tilde


def project_triplet(e: EmbeddingTriplet, params) -> ProjectedTriplet:
    parts = [project(getattr(e, k), params[f"proj.{m}.w"]).data for k, m in zip("tpr", MODALITIES)]
    return ProjectedTriplet(*parts)


def encode_modalities(params, cfg: EncoderConfig, ct, pet, rna):
    """Forward all three modalities of a batch; returns projected tensors."""
    t = project(encode_volume(ct, params, cfg, "ct"), params["proj.ct.w"])
    p = project(encode_volume(pet, params, cfg, "pet"), params["proj.pet.w"])
    r = project(encode_expression(rna, params, cfg), params["proj.rna.w"])
    return t, p, r
