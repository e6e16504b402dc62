"""Desk-scale grounding transformer: text encoder, image encoder, decoder, box head.

The image arrives as a G x G grid of precomputed patch feature vectors. The
decoder fuses text into the image memory, then a single learned query
attends over [text; image] and the box head emits a normalised
(cx, cy, w, h) box through a sigmoid.
"""

import enum
import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .nn import DecoderBlock, EncoderBlock, LayerNorm, Linear, Module, gaussian
from .tensor import Parameter

MAX_TEXT_LEN = 32


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_text_layers: int = 1
    n_image_layers: int = 1
    n_dec_layers: int = 1
    ffn_dim: int = 64
    vocab_size: int = 64
    patch_grid: int = 8
    patch_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if f.name == "seed":
                if value < 0:
                    raise ConfigError(f"seed must be non-negative, got {value}")
            elif value < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


class ModuleTag(str, enum.Enum):
    TEXT_ENCODER = "text"
    IMAGE_ENCODER = "image"
    DECODER = "decoder"

    @property
    def label(self):
        return {"text": "Text Encoder", "image": "Image Encoder", "decoder": "Decoder"}[self.value]

    @classmethod
    def parse(cls, name):
        key = name.strip().lower().replace("-", "_")
        aliases = {
            "text": cls.TEXT_ENCODER, "text_encoder": cls.TEXT_ENCODER, "textencoder": cls.TEXT_ENCODER,
            "image": cls.IMAGE_ENCODER, "image_encoder": cls.IMAGE_ENCODER,
            "imageencoder": cls.IMAGE_ENCODER,
            "decoder": cls.DECODER, "dec": cls.DECODER,
        }
        if key not in aliases:
            raise ValueError(f"unknown module tag {name!r}")
        return aliases[key]


ALL_TAGS = frozenset(ModuleTag)

_TAG_BY_ROOT = {
    "text_encoder": ModuleTag.TEXT_ENCODER,
    "image_encoder": ModuleTag.IMAGE_ENCODER,
    "decoder": ModuleTag.DECODER,
    "box_head": ModuleTag.DECODER,
}


def tag_of(path):
    root = path.split(".", 1)[0]
    try:
        return _TAG_BY_ROOT[root]
    except KeyError:
        raise KeyError(f"parameter path {path!r} belongs to no module tag") from None


# ---------------------------------------------------------------------------
# tokenisation

VOCAB = (
    "<pad>", "<unk>",
    "the", "a", "an", "on", "in", "at", "of", "is", "there", "to", "and", "side",
    "left", "right", "top", "bottom", "middle", "upper", "lower", "center", "centre",
    "airplane", "ship", "storage", "tank", "harbor", "vehicle", "bridge", "chimney",
    "dam", "stadium", "windmill", "airport", "basketball", "court", "tennis", "golf",
    "field", "ground", "track", "train", "station", "overpass", "expressway", "toll",
    "service", "area", "baseball", "diamond", "small", "large", "big", "gray", "white",
    "near", "next", "corner", "image", "one", "two", "object", "building",
)
PAD_ID, UNK_ID = 0, 1
_WORD = re.compile(r"[a-z]+")


def tokenize(text, vocab_size=64):
    """Lower-cased word tokens mapped to ids; out-of-vocabulary words map to <unk>."""
    lookup = {w: i for i, w in enumerate(VOCAB[:vocab_size])}
    return [lookup.get(w, UNK_ID) for w in _WORD.findall(text.lower())]


def pad_tokens(seqs):
    """Right-pad token id lists into an (N, L) id array and a boolean validity mask."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# positional encodings (fixed, not parameters)


def text_positions(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def grid_positions(grid, d):
    """2-D Fourier features of normalised cell centres, row-major over the grid."""
    centres = (np.arange(grid) + 0.5) / grid
    rows, cols = np.meshgrid(centres, centres, indexing="ij")
    u, v = cols.reshape(-1, 1), rows.reshape(-1, 1)

    def axis_features(coord, n):
        j = np.arange(n)[None, :]
        angle = math.pi * (j // 2 + 1) * coord
        return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))

    half = d // 2
    return np.concatenate([axis_features(u, half), axis_features(v, d - half)], axis=1)


# ---------------------------------------------------------------------------
# model


class NormBox(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class TextEncoder(Module):
    def __init__(self, cfg, rng):
        self.embed = Parameter(gaussian(rng, (cfg.vocab_size, cfg.d_model), 1.0))
        for i in range(cfg.n_text_layers):
            setattr(self, f"block{i}", EncoderBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, rng))
        self.ln_out = LayerNorm(cfg.d_model)
        self._pos = text_positions(MAX_TEXT_LEN, cfg.d_model)

    @property
    def blocks(self):
        return [m for name, m in self.children() if name.startswith("block")]

    def forward(self, ids, mask):
        x = T.embedding(self.embed, ids) + self._pos[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_out(x)


class ImageEncoder(Module):
    def __init__(self, cfg, rng):
        self.patch_proj = Linear(cfg.patch_dim, cfg.d_model, rng)
        for i in range(cfg.n_image_layers):
            setattr(self, f"block{i}", EncoderBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, rng))
        self.ln_out = LayerNorm(cfg.d_model)
        self._pos = grid_positions(cfg.patch_grid, cfg.d_model)

    @property
    def blocks(self):
        return [m for name, m in self.children() if name.startswith("block")]

    def forward(self, patches):
        x = self.patch_proj(patches) + self._pos
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)


class Decoder(Module):
    def __init__(self, cfg, rng):
        self.query = Parameter(gaussian(rng, (1, cfg.d_model), 1.0 / math.sqrt(cfg.d_model)))
        for i in range(cfg.n_dec_layers):
            setattr(self, f"block{i}", DecoderBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, rng))
        self.ln_out = LayerNorm(cfg.d_model)

    @property
    def blocks(self):
        return [m for name, m in self.children() if name.startswith("block")]

    def forward(self, text, image, text_mask):
        # learned query plus the masked mean of the text tokens
        weights = text_mask / text_mask.sum(axis=1, keepdims=True)
        pooled = T.matmul(T.as_tensor(weights[:, None, :]), text)
        query = pooled + self.query
        for block in self.blocks:
            query, image, on_image = block(query, text, image, text_mask)
        return self.ln_out(query), on_image


class GroundingModel(Module):
    """One-box-per-query grounding model.

    Parameters live under four roots: ``text_encoder``, ``image_encoder``,
    ``decoder`` and ``box_head``; the box head is tagged as part of the decoder.
    """

    def __init__(self, config):
        rng = np.random.default_rng(config.seed)
        self.text_encoder = TextEncoder(config, rng)
        self.image_encoder = ImageEncoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.box_head = Linear(config.d_model, 4, rng)
        self.config = config
        g = config.patch_grid
        centres = (np.arange(g) + 0.5) / g
        rows, cols = np.meshgrid(centres, centres, indexing="ij")
        self._cell_centres = np.stack([cols.ravel(), rows.ravel()], axis=1)
        cell = 1.0 / g if g > 1 else 0.5
        self._anchor_wh = np.full((1, 2), math.log(cell / (1.0 - cell)))
        # set by peft.inject: {"spec": PeftSpec, "base_checksum": str}
        self.peft = None
        self.refresh_paths()

    def refresh_paths(self):
        seen = set()
        for path, p in self.named_parameters():
            if id(p) in seen:
                raise RuntimeError(f"parameter shared under a second path {path!r}")
            seen.add(id(p))
            p.path = path

    @property
    def params(self):
        return OrderedDict(self.named_parameters())

    def tag_of(self, path):
        return tag_of(path)

    # -- input validation ---------------------------------------------------

    def _check_tokens(self, tokens):
        tokens = list(tokens)
        if not 1 <= len(tokens) <= MAX_TEXT_LEN:
            raise InputError(f"token sequence length must be in [1, {MAX_TEXT_LEN}], got {len(tokens)}")
        for t in tokens:
            if isinstance(t, bool) or not isinstance(t, (int, np.integer)):
                raise InputError(f"token ids must be integers, got {t!r}")
            if not 0 <= t < self.config.vocab_size:
                raise InputError(f"token id {t} outside vocabulary of size {self.config.vocab_size}")
        return tokens

    def _check_patches(self, patches):
        patches = np.asarray(patches.data if isinstance(patches, T.Tensor) else patches,
                             dtype=np.float64)
        g2, pd = self.config.patch_grid ** 2, self.config.patch_dim
        if patches.shape[-2:] != (g2, pd):
            raise InputError(f"expected patches of shape (..., {g2}, {pd}), got {patches.shape}")
        return patches

    # -- batched forward ----------------------------------------------------

    def forward(self, patches, ids, mask):
        """Batched forward: patches (B, G^2, P), ids/mask (B, L) -> Tensor (B, 4)."""
        text = self.text_encoder(ids, mask)
        image = self.image_encoder(patches)
        query, on_image = self.decoder(text, image, mask)
        b = query.shape[0]
        # reference point: where the query looked, as a convex mix of cell centres
        weights = on_image / T.sum(on_image, axis=1, keepdims=True)
        centre = T.matmul(weights, self._cell_centres)
        anchor = T.concat([T.logit(centre), T.Tensor(self._anchor_wh.repeat(b, axis=0))], axis=1)
        offset = T.reshape(self.box_head(query), (b, 4))
        return T.sigmoid(anchor + offset)

    def predict_batch(self, patches, token_lists):
        """Boxes as an (N, 4) array of normalised (cx, cy, w, h)."""
        patches = self._check_patches(patches)
        seqs = [self._check_tokens(t) for t in token_lists]
        ids, mask = pad_tokens(seqs)
        return self.forward(patches, ids, mask).data

    def encode_text(self, tokens):
        ids, mask = pad_tokens([self._check_tokens(tokens)])
        return T.reshape(self.text_encoder(ids, mask), (ids.shape[1], self.config.d_model))

    def encode_image(self, patches):
        patches = self._check_patches(patches)
        if patches.ndim != 2:
            raise InputError(f"encode_image takes one (G^2, patch_dim) grid, got {patches.shape}")
        out = self.image_encoder(patches[None])
        return T.reshape(out, out.shape[1:])

    def predict_box(self, patches, tokens):
        patches = self._check_patches(patches)
        if patches.ndim != 2:
            raise InputError(f"predict_box takes one (G^2, patch_dim) grid, got {patches.shape}")
        return NormBox(*(float(v) for v in self.predict_batch(patches[None], [tokens])[0]))


def build_model(config=None):
    """Deterministically initialise a GroundingModel with every parameter trainable."""
    return GroundingModel(config if config is not None else ModelConfig())


def encode_text(model, tokens):
    return model.encode_text(tokens)


def encode_image(model, patches):
    return model.encode_image(patches)


def predict_box(model, patches, tokens):
    return model.predict_box(patches, tokens)
