"""Minimal pre-norm ViT encoder producing the [CLS] embedding."""
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ops
from .numerics.autodiff import ContractError, TensorNode
from .rng import Rng, derive_seed

INIT_STD = 0.02


class NonFiniteError(FloatingPointError):
    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"non-finite activation after layer {layer}")


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    channels: int = 3
    final_norm: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch_size", "width", "heads", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ValueError("depth must be >= 0 and mlp_ratio > 0")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def hidden(self):
        return int(round(self.width * self.mlp_ratio))

    def to_dict(self):
        return asdict(self)


def init_backbone(cfg, seed, dtype=np.float32):
    """Truncated-normal(0.02) projections, zero biases and [CLS], unit LN scales."""
    rng = Rng(derive_seed(seed, 0xB0))
    d, h = cfg.width, cfg.hidden

    def w(*shape):
        return rng.trunc_normal(shape, std=INIT_STD).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    p = {
        "patch_proj.weight": w(cfg.patch_dim, d),
        "patch_proj.bias": zeros(d),
        "cls_token": zeros(d),
        "pos_embed": w(cfg.n_patches + 1, d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "ln1.weight"] = np.ones(d, dtype=dtype)
        p[b + "ln1.bias"] = zeros(d)
        p[b + "attn.qkv.weight"] = w(d, 3 * d)
        p[b + "attn.qkv.bias"] = zeros(3 * d)
        p[b + "attn.proj.weight"] = w(d, d)
        p[b + "attn.proj.bias"] = zeros(d)
        p[b + "ln2.weight"] = np.ones(d, dtype=dtype)
        p[b + "ln2.bias"] = zeros(d)
        p[b + "mlp.fc1.weight"] = w(d, h)
        p[b + "mlp.fc1.bias"] = zeros(h)
        p[b + "mlp.fc2.weight"] = w(h, d)
        p[b + "mlp.fc2.bias"] = zeros(d)
    if cfg.final_norm:
        p["norm.weight"] = np.ones(d, dtype=dtype)
        p["norm.bias"] = zeros(d)
    return p


def patchify(image, cfg):
    """Split ``(..., H, W, C)`` images into ``(..., N, C·P²)`` patch rows.

    Row ``k`` is the row-major flattening of the ``k``-th patch (raster order)
    viewed as a ``P×P×C`` block.
    """
    image = np.asarray(image)
    H, P, C = cfg.image_size, cfg.patch_size, cfg.channels
    if image.shape[-3:] != (H, H, C):
        raise ContractError(f"image shape {image.shape[-3:]} != {(H, H, C)}")
    lead = image.shape[:-3]
    g = H // P
    x = image.reshape(lead + (g, P, g, P, C))
    k = len(lead)
    x = x.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return x.reshape(lead + (g * g, P * P * C))


def _block(x, nodes, prefix, cfg, cls_only):
    h = ops.layer_norm(x, nodes[prefix + "ln1.weight"], nodes[prefix + "ln1.bias"])
    qkv = ops.linear(h, nodes[prefix + "attn.qkv.weight"], nodes[prefix + "attn.qkv.bias"])
    a = ops.attention(qkv, cfg.heads, query_index=0 if cls_only else None)
    a = ops.linear(a, nodes[prefix + "attn.proj.weight"], nodes[prefix + "attn.proj.bias"])
    if cls_only:
        x = ops.getitem(x, (slice(None), slice(0, 1)))
    x = ops.add(x, a)
    h = ops.layer_norm(x, nodes[prefix + "ln2.weight"], nodes[prefix + "ln2.bias"])
    h = ops.gelu(ops.linear(h, nodes[prefix + "mlp.fc1.weight"], nodes[prefix + "mlp.fc1.bias"]))
    h = ops.linear(h, nodes[prefix + "mlp.fc2.weight"], nodes[prefix + "mlp.fc2.bias"])
    return ops.add(x, h)


def _as_nodes(params):
    return {k: v if isinstance(v, TensorNode) else TensorNode(v) for k, v in params.items()}


def _check(x, layer):
    if not np.isfinite(x.value).all():
        raise NonFiniteError(layer)


def embed_tokens(images, nodes, cfg):
    """``X_0``: [CLS] prepended to projected patches, plus positional embeddings."""
    images = np.asarray(images)
    batch = images.shape[0]
    dtype = nodes["pos_embed"].dtype
    patches = patchify(images, cfg).astype(dtype, copy=False)
    tok = ops.linear(patches, nodes["patch_proj.weight"], nodes["patch_proj.bias"])
    cls = ops.reshape(nodes["cls_token"], (1, 1, cfg.width))
    cls = ops.add(cls, TensorNode(np.zeros((batch, 1, cfg.width), dtype=dtype)))
    x = ops.concat([cls, tok], axis=1)
    return ops.add(x, nodes["pos_embed"])


def encode(images, params, cfg, return_layers=False):
    """Embed a batch ``(B, H, W, C)`` (or a single image) to ``z`` of shape ``(B, d)``.

    ``params`` maps names to arrays or :class:`TensorNode` leaves; gradients
    flow to any leaf with ``requires_grad``. With ``return_layers`` the [CLS]
    state after the embedding and after every block is returned too (arrays),
    and every block is evaluated on all tokens.

    Raises:
        NonFiniteError: an activation became non-finite; ``.layer`` is the block
            index (-1 for the embedding, ``depth`` for the final norm).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    nodes = _as_nodes(params)
    x = embed_tokens(images, nodes, cfg)
    _check(x, -1)
    layers = [x.value[:, 0].copy()] if return_layers else None
    for i in range(cfg.depth):
        # the last block only needs the [CLS] query
        cls_only = (i == cfg.depth - 1) and not return_layers
        x = _block(x, nodes, f"blocks.{i}.", cfg, cls_only)
        _check(x, i)
        if return_layers:
            layers.append(x.value[:, 0].copy())
    z = ops.getitem(x, (slice(None), 0))
    if cfg.final_norm:
        z = ops.layer_norm(z, nodes["norm.weight"], nodes["norm.bias"])
        _check(z, cfg.depth)
    if single:
        z = ops.getitem(z, 0)
    if return_layers:
        return z, layers
    return z
