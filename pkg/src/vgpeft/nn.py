"""Small module system and transformer building blocks on top of :mod:`vgpeft.tensor`."""

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter

MASK_FILL = -1e9


class Module:
    """Container whose Parameter / Module attributes form a named tree.

    Attribute insertion order fixes parameter order, so paths and ordering are
    stable for a given architecture.
    """

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def gaussian(rng, shape, std):
    return rng.standard_normal(shape) * std


class Linear(Module):
    """Dense layer ``y = x W^T + b`` with W of shape (d_out, d_in)."""

    def __init__(self, d_in, d_out, rng):
        self.weight = Parameter(gaussian(rng, (d_out, d_in), 1.0 / math.sqrt(d_in)))
        self.bias = Parameter(np.zeros(d_out), kind=Parameter.BIAS)

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]

    def forward(self, x):
        return T.bias_add(T.matmul(x, T.transpose(self.weight)), self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d), kind=Parameter.BIAS)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d, ffn_dim, rng):
        self.w1 = Linear(d, ffn_dim, rng)
        self.w2 = Linear(ffn_dim, d, rng)

    def forward(self, x):
        return self.w2(T.gelu(self.w1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d, n_heads, rng):
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x):
        b, n, d = x.shape
        x = T.reshape(x, (b, n, self.n_heads, d // self.n_heads))
        return T.transpose(x, (0, 2, 1, 3))

    def forward(self, xq, xkv, key_mask=None, return_weights=False):
        """Attend from ``xq`` (B, Lq, d) over ``xkv`` (B, Lk, d).

        ``key_mask`` is an optional boolean (B, Lk) array, True for real keys.
        With ``return_weights`` the (B, heads, Lq, Lk) attention is returned too.
        """
        b, lq, d = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.n_heads))
        if key_mask is not None:
            fill = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL)
            scores = scores + fill[:, None, None, :]
        attn = T.softmax(scores, axis=-1)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        out = self.o(T.reshape(out, (b, lq, d)))
        return (out, attn) if return_weights else out


def _adapt(block, sublayer, h):
    adapter = getattr(block, f"{sublayer}_adapter", None)
    return h if adapter is None else adapter(h)


class EncoderBlock(Module):
    """Pre-norm self-attention block. Adapters may be attached per sublayer."""

    SUBLAYERS = ("attn", "ffn")

    def __init__(self, d, n_heads, ffn_dim, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim, rng)
        self.attn_adapter = None
        self.ffn_adapter = None

    def forward(self, x, mask=None):
        h = self.ln1(x)
        x = _adapt(self, "attn", x + self.attn(h, h, mask))
        x = _adapt(self, "ffn", x + self.ffn(self.ln2(x)))
        return x


class DecoderBlock(Module):
    """Cross-modal decoder block.

    1. fusion: image tokens attend over text tokens (text-conditioned memory)
    2. cross: the query attends over the concatenated [text; image] memory
    3. ffn on the query
    """

    SUBLAYERS = ("fusion", "cross", "ffn")

    def __init__(self, d, n_heads, ffn_dim, rng):
        self.fusion_ln = LayerNorm(d)
        self.fusion = MultiHeadAttention(d, n_heads, rng)
        self.cross_ln = LayerNorm(d)
        self.mem_ln = LayerNorm(d)
        self.cross = MultiHeadAttention(d, n_heads, rng)
        self.ffn_ln = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim, rng)
        self.fusion_adapter = None
        self.cross_adapter = None
        self.ffn_adapter = None

    def forward(self, query, text, image, text_mask=None):
        """Returns the updated query and image memory plus the query's
        head-averaged attention over image tokens, shape (B, n_image)."""
        image = _adapt(self, "fusion", image + self.fusion(self.fusion_ln(image), text, text_mask))
        memory = self.mem_ln(T.concat([text, image], axis=1))
        mem_mask = None
        if text_mask is not None:
            b, n_img = image.shape[0], image.shape[1]
            mem_mask = np.concatenate([text_mask, np.ones((b, n_img), dtype=bool)], axis=1)
        h, attn = self.cross(self.cross_ln(query), memory, mem_mask, return_weights=True)
        query = _adapt(self, "cross", query + h)
        query = _adapt(self, "ffn", query + self.ffn(self.ffn_ln(query)))
        n_text = text.shape[1]
        on_image = attn[:, 0, 0, n_text:]
        return query, image, on_image
