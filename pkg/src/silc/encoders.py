"""Tiny two-tower transformer encoders.

The image tower is a pre-LN ViT whose pooling is a single-probe attention
head ("MAP head"): one learnable query cross-attends over patch tokens,
followed by layer norm and an MLP with a residual.  The per-patch value
projections of that head, pushed through the same layer norm + MLP + output
projection, are the patch embeddings used for zero-shot segmentation -- the
pooled and patch pathways share every parameter after the value projection.

The text tower mirrors the block stack; pooling takes the representation of
the last non-pad token (position 0 for an all-pad input).  Local image
views get their own learned positional grid instead of interpolating the
global one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Stream, derive

INIT_STD = 0.02
MASK_BIAS = -1e9


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    embed_dim: int = 32
    local_size: int = 16
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.local_size % self.patch_size != 0:
            raise ValueError(
                f"local_size {self.local_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_patches_local(self) -> int:
        return (self.local_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    max_len: int = 16
    width: int = 64
    depth: int = 4
    heads: int = 4
    embed_dim: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class ImageForward:
    pooled: Tensor  # (B, J) pre-normalization image embeddings
    patch_embeddings: Tensor  # (B, n_patches, J)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def _tn(stream: Stream, shape, dtype) -> Tensor:
    data = stream.trunc_normal(int(np.prod(shape)), INIT_STD).reshape(shape)
    return Tensor(data.astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _init_attn(p, prefix, stream, width, dtype):
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = _tn(stream, (width, width), dtype)
    for name in ("bq", "bk", "bv", "bo"):
        p[f"{prefix}.{name}"] = _zeros((width,), dtype)


def _init_block(p, prefix, stream, width, hidden, dtype):
    p[f"{prefix}.ln1.scale"] = _ones((width,), dtype)
    p[f"{prefix}.ln1.shift"] = _zeros((width,), dtype)
    _init_attn(p, f"{prefix}.attn", stream, width, dtype)
    p[f"{prefix}.ln2.scale"] = _ones((width,), dtype)
    p[f"{prefix}.ln2.shift"] = _zeros((width,), dtype)
    p[f"{prefix}.mlp.w1"] = _tn(stream, (width, hidden), dtype)
    p[f"{prefix}.mlp.b1"] = _zeros((hidden,), dtype)
    p[f"{prefix}.mlp.w2"] = _tn(stream, (hidden, width), dtype)
    p[f"{prefix}.mlp.b2"] = _zeros((width,), dtype)


def init_image_params(cfg: ImageEncoderConfig, seed: int, dtype=np.float32) -> dict:
    stream = Stream(derive(seed, "image_tower"))
    p: dict[str, Tensor] = {}
    patch_in = cfg.patch_size * cfg.patch_size * 3
    hidden = cfg.mlp_ratio * cfg.width
    p["img.patch.w"] = _tn(stream, (patch_in, cfg.width), dtype)
    p["img.patch.b"] = _zeros((cfg.width,), dtype)
    p["img.pos.global"] = _tn(stream, (cfg.num_patches, cfg.width), dtype)
    p["img.pos.local"] = _tn(stream, (cfg.num_patches_local, cfg.width), dtype)
    for i in range(cfg.depth):
        _init_block(p, f"img.b{i}", stream, cfg.width, hidden, dtype)
    p["img.ln.scale"] = _ones((cfg.width,), dtype)
    p["img.ln.shift"] = _zeros((cfg.width,), dtype)
    p["img.map.probe"] = _tn(stream, (1, 1, cfg.width), dtype)
    _init_attn(p, "img.map.attn", stream, cfg.width, dtype)
    p["img.map.ln.scale"] = _ones((cfg.width,), dtype)
    p["img.map.ln.shift"] = _zeros((cfg.width,), dtype)
    p["img.map.mlp.w1"] = _tn(stream, (cfg.width, hidden), dtype)
    p["img.map.mlp.b1"] = _zeros((hidden,), dtype)
    p["img.map.mlp.w2"] = _tn(stream, (hidden, cfg.width), dtype)
    p["img.map.mlp.b2"] = _zeros((cfg.width,), dtype)
    p["img.out.w"] = _tn(stream, (cfg.width, cfg.embed_dim), dtype)
    p["img.out.b"] = _zeros((cfg.embed_dim,), dtype)
    return p


def init_text_params(cfg: TextEncoderConfig, seed: int, dtype=np.float32) -> dict:
    stream = Stream(derive(seed, "text_tower"))
    p: dict[str, Tensor] = {}
    p["txt.tok"] = _tn(stream, (cfg.vocab_size, cfg.width), dtype)
    p["txt.pos"] = _tn(stream, (cfg.max_len, cfg.width), dtype)
    for i in range(cfg.depth):
        _init_block(p, f"txt.b{i}", stream, cfg.width, cfg.mlp_ratio * cfg.width, dtype)
    p["txt.ln.scale"] = _ones((cfg.width,), dtype)
    p["txt.ln.shift"] = _zeros((cfg.width,), dtype)
    p["txt.out.w"] = _tn(stream, (cfg.width, cfg.embed_dim), dtype)
    p["txt.out.b"] = _zeros((cfg.embed_dim,), dtype)
    return p


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _ln(p, prefix, x):
    return ad.layer_norm_affine(x, p[f"{prefix}.scale"], p[f"{prefix}.shift"])


def _mlp(p, prefix, x):
    h = ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _split_heads(x, heads):
    b, t, w = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, w // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def _attention(p, prefix, q_in, kv_in, heads, mask_bias=None, want_values=False):
    """Multi-head attention; q_in may broadcast against kv_in's batch."""
    d = q_in.shape[-1] // heads
    q = _split_heads(ad.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(ad.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(ad.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    att = ad.attention_core(q, k, v, 1.0 / np.sqrt(d), mask_bias)
    out = ad.linear(_merge_heads(att), p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return (out, v) if want_values else (out, None)


def _block_forward(p, prefix, x, heads, mask_bias=None):
    h = _ln(p, f"{prefix}.ln1", x)
    a, _ = _attention(p, f"{prefix}.attn", h, h, heads, mask_bias)
    x = ad.add(x, a)
    m = _mlp(p, f"{prefix}.mlp", _ln(p, f"{prefix}.ln2", x))
    return ad.add(x, m)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, n_patches, patch*patch*3), row-major patch order."""
    b, h, w, c = images.shape
    hp, wp = h // patch, w // patch
    x = images.reshape(b, hp, patch, wp, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, hp * wp, patch * patch * c)


def vision_forward(
    p: dict,
    cfg: ImageEncoderConfig,
    images: np.ndarray,
    view: str = "global",
    want_patches: bool = False,
) -> ImageForward:
    """Encode a batch of square images of the configured size for `view`.

    ``want_patches`` additionally materializes the per-patch embedding
    pathway (needed for segmentation, skipped on the training hot path).
    """
    expected = cfg.image_size if view == "global" else cfg.local_size
    if images.ndim != 4 or images.shape[1] != expected or images.shape[2] != expected:
        raise ValueError(
            f"expected (B, {expected}, {expected}, 3) images for view={view!r}, "
            f"got {images.shape}"
        )
    tokens = Tensor(patchify(images.astype(np.float32, copy=False), cfg.patch_size))
    x = ad.add(ad.linear(tokens, p["img.patch.w"], p["img.patch.b"]), p[f"img.pos.{view}"])
    for i in range(cfg.depth):
        x = _block_forward(p, f"img.b{i}", x, cfg.heads)
    x = _ln(p, "img.ln", x)

    # MAP pooling head: probe attends over patch tokens
    att_out, v = _attention(
        p, "img.map.attn", p["img.map.probe"], x, cfg.heads, want_values=want_patches
    )
    pooled = ad.reshape(att_out, (att_out.shape[0], cfg.width))
    pooled = ad.add(pooled, _mlp(p, "img.map.mlp", _ln(p, "img.map.ln", pooled)))
    pooled = ad.linear(pooled, p["img.out.w"], p["img.out.b"])

    patch_emb = None
    if want_patches:
        # patch pathway: the head's value vectors through the same out-proj,
        # layer norm, MLP and embedding projection as the pooled token
        vals = ad.linear(_merge_heads(v), p["img.map.attn.wo"], p["img.map.attn.bo"])
        vals = ad.add(vals, _mlp(p, "img.map.mlp", _ln(p, "img.map.ln", vals)))
        patch_emb = ad.linear(vals, p["img.out.w"], p["img.out.b"])
    return ImageForward(pooled=pooled, patch_embeddings=patch_emb)


def text_forward(p: dict, cfg: TextEncoderConfig, tokens: np.ndarray) -> Tensor:
    """Encode a (B, T) int token batch to (B, embed_dim)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > cfg.max_len:
        raise ValueError(f"expected (B, <= {cfg.max_len}) token ids, got {tokens.shape}")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        bad = int(tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0])
        raise ValueError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")

    # trailing all-pad columns carry no information and can be trimmed
    content = np.flatnonzero((tokens != 0).any(axis=0))
    t = int(content[-1]) + 1 if content.size else 1
    tokens = tokens[:, :t]
    b = tokens.shape[0]
    onehot = np.zeros((b, t, cfg.vocab_size), dtype=np.float32)
    onehot[np.arange(b)[:, None], np.arange(t)[None, :], tokens] = 1.0
    x = ad.add(ad.matmul(Tensor(onehot), p["txt.tok"]), ad.slice_(p["txt.pos"], np.s_[:t]))

    # keys at pad positions are masked out; an all-pad row degrades to
    # uniform attention (constant bias cancels in softmax)
    pad = tokens == 0
    bias = np.where(pad, np.float32(MASK_BIAS), np.float32(0.0))[:, None, None, :]
    mask_bias = Tensor(bias)
    for i in range(cfg.depth):
        x = _block_forward(p, f"txt.b{i}", x, cfg.heads, mask_bias)
    x = _ln(p, "txt.ln", x)

    # pool the last non-pad position (0 when everything is padding)
    nonpad = ~pad
    last = np.where(nonpad.any(axis=1), t - 1 - nonpad[:, ::-1].argmax(axis=1), 0)
    sel = np.zeros((b, 1, t), dtype=np.float32)
    sel[np.arange(b), 0, last] = 1.0
    pooled = ad.reshape(ad.matmul(Tensor(sel), x), (b, cfg.width))
    return ad.linear(pooled, p["txt.out.w"], p["txt.out.b"])


def encode_image(p: dict, cfg: ImageEncoderConfig, image: np.ndarray, view: str = "global"):
    """Single-image wrapper returning (embed_dim,) pooled and (n, embed_dim) patches."""
    fwd = vision_forward(p, cfg, image[None], view)
    return ImageForward(
        pooled=ad.reshape(fwd.pooled, (cfg.embed_dim,)),
        patch_embeddings=ad.reshape(
            fwd.patch_embeddings, (fwd.patch_embeddings.shape[1], cfg.embed_dim)
        ),
    )


def encode_text(p: dict, cfg: TextEncoderConfig, token_ids) -> Tensor:
    """Single-caption wrapper returning an (embed_dim,) vector."""
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.size > cfg.max_len:
        raise ValueError(f"caption length {ids.size} exceeds max_len {cfg.max_len}")
    padded = np.zeros((1, cfg.max_len), dtype=np.int64)
    padded[0, : ids.size] = ids
    return ad.reshape(text_forward(p, cfg, padded), (cfg.embed_dim,))
