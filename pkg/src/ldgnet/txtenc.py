"""Pre-norm transformer text encoder pooled at the END token."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor
from .textpipe import MAX_LEN


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    max_len: int = MAX_LEN
    vocab_size: int = 256 + 512 + 3
    d_sem: int = 64
    causal: bool = False

    def validate(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if min(self.layers, self.width, self.heads, self.max_len, self.d_sem) < 1:
            raise ValueError("text encoder sizes must be positive")
        if self.vocab_size < 259:
            raise ValueError("vocabulary must hold 256 bytes plus 3 special tokens")

    @property
    def end_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1


def init_text_encoder(config: TextEncoderConfig, seed: int) -> dict[str, Tensor]:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    w = config.width
    std = w**-0.5
    params: dict[str, Tensor] = {}

    def normal(name, shape, s):
        params[name] = Tensor(rng.normal(0.0, s, size=shape), True)

    def zeros(name, n):
        params[name] = Tensor(np.zeros(n), True)

    def ones(name, n):
        params[name] = Tensor(np.ones(n), True)

    normal("txt.tok", (config.vocab_size, w), 0.02)
    normal("txt.pos", (config.max_len, w), 0.01)
    proj_std = std * (2 * config.layers) ** -0.5
    for i in range(config.layers):
        p = f"txt.layer{i}"
        ones(f"{p}.ln1.gamma", w)
        zeros(f"{p}.ln1.beta", w)
        normal(f"{p}.attn.qkv.w", (w, 3 * w), std)
        zeros(f"{p}.attn.qkv.b", 3 * w)
        normal(f"{p}.attn.out.w", (w, w), proj_std)
        zeros(f"{p}.attn.out.b", w)
        ones(f"{p}.ln2.gamma", w)
        zeros(f"{p}.ln2.beta", w)
        normal(f"{p}.mlp.fc.w", (w, 4 * w), std)
        zeros(f"{p}.mlp.fc.b", 4 * w)
        normal(f"{p}.mlp.proj.w", (4 * w, w), proj_std)
        zeros(f"{p}.mlp.proj.b", w)
    ones("txt.ln_final.gamma", w)
    zeros("txt.ln_final.beta", w)
    normal("txt.proj.w", (w, config.d_sem), std)
    zeros("txt.proj.b", config.d_sem)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in params.values())


def _block(params, p, x, heads, key_mask, causal):
    w = x.shape[-1]
    h = nd.layernorm(x, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
    qkv = nd.linear(h, params[f"{p}.attn.qkv.w"], params[f"{p}.attn.qkv.b"])
    q, k, v = qkv[..., :w], qkv[..., w : 2 * w], qkv[..., 2 * w :]
    a = nd.mha(q, k, v, heads=heads, causal=causal, key_mask=key_mask)
    x = nd.add(x, nd.linear(a, params[f"{p}.attn.out.w"], params[f"{p}.attn.out.b"]))
    h = nd.layernorm(x, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
    h = nd.relu(nd.linear(h, params[f"{p}.mlp.fc.w"], params[f"{p}.mlp.fc.b"]))
    return nd.add(x, nd.linear(h, params[f"{p}.mlp.proj.w"], params[f"{p}.mlp.proj.b"]))


def encode_text(params, config: TextEncoderConfig, ids, key_mask=None) -> Tensor:
    """Token ids (N, T) -> unit-norm linguistic features (N, d_sem).

    PAD positions are excluded from attention; the output is read at the
    first END token of each row.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    n, t = ids.shape
    if t > config.max_len:
        raise ValueError(f"sequence length {t} exceeds {config.max_len}")
    if key_mask is None:
        key_mask = ids != config.pad_id
    is_end = ids == config.end_id
    if not is_end.any(axis=1).all():
        raise ValueError("every sequence must contain the END token")
    end_pos = is_end.argmax(axis=1)
    x = nd.add(nd.embedding(params["txt.tok"], ids), params["txt.pos"][:t])
    for i in range(config.layers):
        x = _block(params, f"txt.layer{i}", x, config.heads, key_mask, config.causal)
    pooled = x[np.arange(n), end_pos]
    pooled = nd.layernorm(pooled, params["txt.ln_final.gamma"], params["txt.ln_final.beta"])
    return nd.l2_normalize(nd.linear(pooled, params["txt.proj.w"], params["txt.proj.b"]))
