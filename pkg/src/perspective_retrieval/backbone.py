"""Frozen encoder stub, synthetic paired corpus, and the MPSF feature container.

The stub is a small pre-norm transformer with seeded, frozen weights. An
adapter may be attached after the feed-forward sub-layer of every block.
The corpus generator fabricates token grids for images, their
sub-perspectives and five captions each, all driven by per-class latents so
that retrieval is learnable.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .g2a import AdapterParams, AttentionParams, ConfigurationError, g2a_forward, mhsa
from .numerics import Tensor, gelu, layer_norm, tmean

__all__ = [
    "CAPTIONS_PER_IMAGE",
    "SPLITS",
    "DESK_CORPUS",
    "Corpus",
    "gen_corpus",
    "BackboneStub",
    "init_stub",
    "encode",
    "FeatureFormatError",
    "save_features",
    "load_features",
]

CAPTIONS_PER_IMAGE = 5
SPLITS = ("train", "val", "test")

# Generator settings of the desk-scale corpus used by the end-to-end run and
# the ablation grids (seed 0 unless stated otherwise).
DESK_CORPUS = dict(n_classes=4, n_images=80, K=4, D_in=32, n_tokens=8, noise_level=1.0)


# ------------------------------------------------------------------- corpus


@dataclass(frozen=True)
class Corpus:
    """Paired token grids. Arrays are float64 but float32-representable."""

    images: np.ndarray  # n x N x D_in
    sub_perspectives: np.ndarray  # n x K x N x D_in
    captions: np.ndarray  # n x 5 x N x D_in
    class_id: np.ndarray  # n
    split: np.ndarray  # n, indexes into SPLITS

    def __post_init__(self):
        n, _, width = self.images.shape
        if self.captions.shape[:2] != (n, CAPTIONS_PER_IMAGE):
            raise ValueError(f"every image needs {CAPTIONS_PER_IMAGE} captions")
        if self.sub_perspectives.shape[0] != n or self.sub_perspectives.shape[1] < 1:
            raise ValueError("every image needs K >= 1 sub-perspective grids")
        if self.sub_perspectives.shape[-1] != width or self.captions.shape[-1] != width:
            raise ValueError("all token grids must share the same token width")

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def K(self) -> int:
        return self.sub_perspectives.shape[1]

    @property
    def token_width(self) -> int:
        return self.images.shape[-1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))

    def to_bank(self) -> dict[str, np.ndarray]:
        return {
            "images": self.images,
            "sub_perspectives": self.sub_perspectives,
            "captions": self.captions,
            "class_id": self.class_id.astype(np.float64),
            "split": self.split.astype(np.float64),
        }

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray]) -> Corpus:
        return cls(
            images=bank["images"],
            sub_perspectives=bank["sub_perspectives"],
            captions=bank["captions"],
            class_id=bank["class_id"].astype(np.int64),
            split=bank["split"].astype(np.int64),
        )


def _unit(rng: np.random.Generator, *shape: int) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _split_labels(n: int) -> np.ndarray:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    labels = np.full(n, 2, dtype=np.int64)
    labels[:n_train] = 0
    labels[n_train : n_train + n_val] = 1
    return labels


def gen_corpus(
    seed: int,
    n_classes: int = 4,
    n_images: int = 80,
    K: int = 4,
    D_in: int = 32,
    n_tokens: int = 8,
    noise_level: float = 0.1,
    perspective_mix: float = 0.5,
    global_detail: float = 0.25,
) -> Corpus:
    """Seeded synthetic corpus.

    Image ``i`` belongs to class ``i % n_classes``. Every grid starts with a
    modality marker token (the distinguished first token used by CLS
    pooling); the remaining tokens are a latent plus noise:

    * image tokens: class latent + noise
    * caption tokens: the same class latent + independent noise
    * sub-perspective ``k``: a blend of the class latent and a latent
      specific to (class, k), plus noise

    Noise has two parts, both scaled by ``noise_level``: an offset shared by
    all grids of one image (so an image is distinguishable from its
    classmates) and independent per-token jitter. The global image grid sees
    only ``global_detail`` of that per-image offset, while sub-perspectives
    and captions see all of it: the fine detail that tells classmates apart
    is clearer in the close-up views than in the whole image. Splits are
    8:1:1 by index.
    Values are rounded to float32 so the corpus survives a single-precision
    round trip unchanged.
    """
    if n_classes < 2 or n_images < n_classes:
        raise ValueError(f"need n_images >= n_classes >= 2, got {n_images} images, {n_classes} classes")
    if K < 1 or n_tokens < 2 or D_in < 1:
        raise ValueError("K >= 1, n_tokens >= 2 and D_in >= 1 are required")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    if not 0.0 <= global_detail <= 1.0:
        raise ValueError("global_detail must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    class_lat = _unit(rng, n_classes, D_in)
    persp_lat = _unit(rng, n_classes, K, D_in)
    img_marker, txt_marker = _unit(rng, 2, D_in)
    instance = rng.normal(size=(n_images, D_in)) / math.sqrt(D_in)
    class_id = np.arange(n_images) % n_classes

    body = n_tokens - 1
    jitter_scale = noise_level / math.sqrt(D_in)

    def grids(centers: np.ndarray, marker: np.ndarray) -> np.ndarray:
        # centers: n x ... x D_in -> n x ... x n_tokens x D_in
        lead = centers.shape[:-1]
        jitter = rng.normal(scale=jitter_scale, size=lead + (body, D_in))
        tokens = centers[..., None, :] + jitter
        first = np.broadcast_to(marker, lead + (1, D_in))
        return np.concatenate([first, tokens], axis=-2)

    shift = noise_level * instance
    img_centers = class_lat[class_id] + global_detail * shift
    images = grids(img_centers, img_marker)

    mixed = perspective_mix * class_lat[:, None, :] + (1.0 - perspective_mix) * persp_lat
    sub_centers = mixed[class_id] + shift[:, None, :]
    subs = grids(sub_centers, img_marker)

    cap_centers = np.repeat((class_lat[class_id] + shift)[:, None, :], CAPTIONS_PER_IMAGE, axis=1)
    captions = grids(cap_centers, txt_marker)

    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return Corpus(
        images=f32(images),
        sub_perspectives=f32(subs),
        captions=f32(captions),
        class_id=class_id,
        split=_split_labels(n_images),
    )


# ------------------------------------------------------------------ encoder


@dataclass
class FrozenBlock:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    W_ff1: Tensor
    b_ff1: Tensor
    W_ff2: Tensor
    b_ff2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {k: v for k, v in vars(self).items() if isinstance(v, Tensor)}
        out.update({f"attn.{k}": v for k, v in self.attn.tensors().items()})
        return out


@dataclass
class BackboneStub:
    blocks: list[FrozenBlock]
    lnf_g: Tensor
    lnf_b: Tensor
    proj: Tensor  # width x embed_dim
    pooling: str = "cls"

    def __post_init__(self):
        if self.pooling not in ("cls", "mean"):
            raise ConfigurationError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.proj.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.proj.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update({f"L{i}.{k}": v for k, v in b.tensors().items()})
        out.update({"lnf_g": self.lnf_g, "lnf_b": self.lnf_b, "proj": self.proj})
        return out

    def with_pooling(self, pooling: str) -> BackboneStub:
        return BackboneStub(self.blocks, self.lnf_g, self.lnf_b, self.proj, pooling)


def init_stub(
    seed: int,
    width: int = 32,
    embed_dim: int = 32,
    n_layers: int = 2,
    heads: int = 4,
    ff_mult: int = 2,
    pooling: str = "cls",
) -> BackboneStub:
    """Stub encoder with weights drawn once from ``seed`` and frozen."""
    if width % heads:
        raise ConfigurationError(f"{heads} heads do not divide width {width}")
    rng = np.random.default_rng(seed)

    def dense(i, o):
        return Tensor(rng.normal(0, 1 / math.sqrt(i), (i, o)))

    def small(*shape):
        return Tensor(0.02 * rng.normal(size=shape))

    blocks = []
    for _ in range(n_layers):
        attn = AttentionParams(
            Wq=dense(width, width), bq=small(width),
            Wk=dense(width, width),
            Wv=dense(width, width), bv=small(width),
            Wo=dense(width, width), bo=small(width),
            heads=heads,
        )  # fmt: skip
        blocks.append(
            FrozenBlock(
                ln1_g=Tensor(1 + small(width).data), ln1_b=small(width), attn=attn,
                ln2_g=Tensor(1 + small(width).data), ln2_b=small(width),
                W_ff1=dense(width, ff_mult * width), b_ff1=small(ff_mult * width),
                W_ff2=dense(ff_mult * width, width), b_ff2=small(width),
            )  # fmt: skip
        )
    return BackboneStub(
        blocks=blocks,
        lnf_g=Tensor(1 + small(width).data),
        lnf_b=small(width),
        proj=dense(width, embed_dim),
        pooling=pooling,
    )


def encode(
    stub: BackboneStub,
    tokens,
    adapters: Sequence[AdapterParams | None] | None = None,
    attn_on: bool = True,
    gate_on: bool = True,
) -> Tensor:
    """Global feature of a token grid (N x D_in -> D) or a batch of grids.

    Each frozen block computes ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``;
    the site's adapter, when given, is applied to the block output. The
    result is final-normed, pooled (first token or token mean) and projected.
    """
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError(f"need at least one token, got shape {x.shape}")
    if x.shape[-1] != stub.width:
        raise ConfigurationError(f"token width {x.shape[-1]} does not match stub width {stub.width}")
    if adapters is not None and len(adapters) != stub.n_layers:
        raise ConfigurationError(f"{len(adapters)} adapters given for {stub.n_layers} adapter sites")

    for i, blk in enumerate(stub.blocks):
        x = x + mhsa(layer_norm(x) * blk.ln1_g + blk.ln1_b, blk.attn)
        h = layer_norm(x) * blk.ln2_g + blk.ln2_b
        x = x + gelu(h @ blk.W_ff1 + blk.b_ff1) @ blk.W_ff2 + blk.b_ff2
        if adapters is not None and adapters[i] is not None:
            x = g2a_forward(x, adapters[i], attn_on=attn_on, gate_on=gate_on)

    x = layer_norm(x) * stub.lnf_g + stub.lnf_b
    pooled = x[..., 0, :] if stub.pooling == "cls" else tmean(x, axis=x.ndim - 2)
    if pooled.ndim == 1:
        return (pooled.reshape(1, -1) @ stub.proj).reshape(stub.embed_dim)
    return pooled @ stub.proj


# --------------------------------------------------------- feature container

MAGIC = b"MPSF"
_F32, _F64 = 0, 1


class FeatureFormatError(ValueError):
    """Malformed feature file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def save_features(path, bank: Mapping[str, np.ndarray], double: bool = False) -> None:
    """Write named arrays to an MPSF file.

    Version 1 (default) stores little-endian float32. ``double=True`` writes
    version 2, which adds a dtype byte after the rank and stores float64, for
    containers that must round-trip exactly (checkpoints).
    """
    version = 2 if double else 1
    chunks = [MAGIC, struct.pack("<II", version, len(bank))]
    for name, arr in bank.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"entry {name!r} contains non-finite values")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} name or rank too large for the format")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        if double:
            chunks.append(struct.pack("<B", _F64))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8" if double else "<f4").tobytes(order="C"))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_features(path) -> dict[str, np.ndarray]:
    """Read an MPSF file into float64 arrays.

    Raises:
        FeatureFormatError: bad magic, unknown version, truncation, or
            extents that overrun the file. Nothing is returned on error.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FeatureFormatError(f"truncated while reading {what}", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FeatureFormatError("bad magic, not an MPSF file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version not in (1, 2):
        raise FeatureFormatError(f"unsupported version {version}", 4)

    bank: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FeatureFormatError("entry name is not UTF-8", start + 2) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dtype_code = _F32
        if version == 2:
            dtype_pos = pos
            (dtype_code,) = struct.unpack("<B", take(1, "dtype"))
            if dtype_code not in (_F32, _F64):
                raise FeatureFormatError(f"unknown dtype code {dtype_code}", dtype_pos)
        extents_pos = pos
        extents = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        itemsize = 8 if dtype_code == _F64 else 4
        count_vals = math.prod(extents)
        nbytes = count_vals * itemsize
        if nbytes > len(buf) - pos:
            raise FeatureFormatError(
                f"entry {name!r} extents {extents} need {nbytes} bytes, only {len(buf) - pos} remain",
                extents_pos,
            )
        raw = take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8" if dtype_code == _F64 else "<f4")
        bank[name] = arr.astype(np.float64).reshape(extents)
    if pos != len(buf):
        raise FeatureFormatError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return bank
