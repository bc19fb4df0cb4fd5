"""Residual 3-D CNN image encoder with classification and projection heads.

Layout: [residual block -> maxpool3d] x 2 -> conv3d -> flatten, then
``Cls`` (affine + softmax) and ``Proj`` (affine + L2 normalisation).

Patches enter as (N, d, s, s) and are treated as single-channel volumes
(N, 1, d, s, s) so the spectral axis is convolved like a spatial one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor


@dataclass(frozen=True)
class ImageEncoderConfig:
    patch: int = 13
    bands: int = 48
    widths: tuple[int, int] = (8, 16)
    kernel: int = 3
    d_sem: int = 64
    classes: int = 7
    pool: int = 2

    def validate(self) -> None:
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError(f"patch size must be odd, got {self.patch}")
        if self.d_sem < 2:
            raise ValueError("d_sem must be >= 2")
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ValueError("need two stage widths, each >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same-padding")
        if self.classes < 1 or self.bands < 1:
            raise ValueError("classes and bands must be >= 1")
        d, s = self.pooled_extent()
        if d < 1 or s < 1:
            raise ValueError(
                f"patch {self.patch} x bands {self.bands} exhausted by two "
                f"pooling stages of stride {self.pool}"
            )

    def pooled_extent(self) -> tuple[int, int]:
        d, s = self.bands, self.patch
        for _ in range(2):
            d, s = d // self.pool, s // self.pool
        return d, s

    @property
    def feature_dim(self) -> int:
        d, s = self.pooled_extent()
        return self.widths[1] * d * s * s


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(rng, prefix, cin, cout, k, params):
    params[f"{prefix}.w"] = Tensor(_kaiming_uniform(rng, (cout, cin, k, k, k), cin * k**3), True)
    params[f"{prefix}.b"] = Tensor(np.zeros(cout), True)


def _bn_params(prefix, c, params, buffers):
    params[f"{prefix}.gamma"] = Tensor(np.ones(c), True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(c), True)
    buffers[f"{prefix}.mean"] = np.zeros(c)
    buffers[f"{prefix}.var"] = np.ones(c)


def _linear_params(rng, prefix, fin, fout, params):
    params[f"{prefix}.w"] = Tensor(_kaiming_uniform(rng, (fin, fout), fin), True)
    params[f"{prefix}.b"] = Tensor(np.zeros(fout), True)


def init_image_encoder(
    config: ImageEncoderConfig, seed: int, with_proj: bool = True
) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Build (params, buffers). Names are prefixed ``img.``, ``cls.``, ``proj.``.

    The projection head draws from its own stream, so omitting it leaves every
    other parameter bit-identical.
    """
    config.validate()
    body_rng, proj_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 1]).spawn(2))
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    k = config.kernel
    cin = 1
    for b, width in enumerate(config.widths, start=1):
        p = f"img.block{b}"
        _conv_params(body_rng, f"{p}.conv1", cin, width, k, params)
        _bn_params(f"{p}.bn1", width, params, buffers)
        _conv_params(body_rng, f"{p}.conv2", width, width, k, params)
        _bn_params(f"{p}.bn2", width, params, buffers)
        _conv_params(body_rng, f"{p}.conv3", width, width, k, params)
        cin = width
    _conv_params(body_rng, "img.conv", cin, cin, k, params)
    _linear_params(body_rng, "cls", config.feature_dim, config.classes, params)
    if with_proj:
        _linear_params(proj_rng, "proj", config.feature_dim, config.d_sem, params)
    return params, buffers


def _conv_bn_relu(params, buffers, conv, bn, x, training, pad):
    y = nd.conv3d(x, params[f"{conv}.w"], params[f"{conv}.b"], stride=1, padding=pad)
    y = nd.batchnorm3d(
        y,
        params[f"{bn}.gamma"],
        params[f"{bn}.beta"],
        buffers[f"{bn}.mean"],
        buffers[f"{bn}.var"],
        training=training,
    )
    return nd.relu(y)


def residual_block_forward(params, buffers, prefix: str, x: Tensor, training: bool) -> Tensor:
    """relu(conv3(cbr2(cbr1(x))) + cbr1(x)): the skip taps the first stage."""
    k = params[f"{prefix}.conv1.w"].shape[-1]
    pad = k // 2
    first = _conv_bn_relu(params, buffers, f"{prefix}.conv1", f"{prefix}.bn1", x, training, pad)
    second = _conv_bn_relu(params, buffers, f"{prefix}.conv2", f"{prefix}.bn2", first, training, pad)
    branch = nd.conv3d(second, params[f"{prefix}.conv3.w"], params[f"{prefix}.conv3.b"], padding=pad)
    if branch.shape != first.shape:
        raise ValueError(f"residual addends differ: {branch.shape} vs {first.shape}")
    return nd.relu(nd.add(branch, first))


def backbone_forward(params, buffers, config: ImageEncoderConfig, patches, training: bool) -> Tensor:
    """(N, d, s, s) patches -> flattened (N, feature_dim) encoder output."""
    x = nd.as_tensor(patches)
    if x.ndim != 4 or x.shape[1:] != (config.bands, config.patch, config.patch):
        raise ValueError(
            f"expected patches of shape (N, {config.bands}, {config.patch}, {config.patch}), "
            f"got {x.shape}"
        )
    n = x.shape[0]
    h = nd.reshape(x, (n, 1) + x.shape[1:])
    for b in range(1, len(config.widths) + 1):
        h = residual_block_forward(params, buffers, f"img.block{b}", h, training)
        h = nd.maxpool3d(h, kernel=config.pool)
    pad = config.kernel // 2
    h = nd.conv3d(h, params["img.conv.w"], params["img.conv.b"], padding=pad)
    return nd.reshape(h, (n, -1))


def classify(params, features: Tensor) -> tuple[Tensor, Tensor]:
    logits = nd.linear(features, params["cls.w"], params["cls.b"])
    return logits, nd.softmax(logits)


def project(params, features: Tensor) -> Tensor:
    return nd.l2_normalize(nd.linear(features, params["proj.w"], params["proj.b"]))


def encode_image(params, buffers, config: ImageEncoderConfig, patches, training: bool = False):
    """Returns (logits, probs, visual feature).  ``patches`` may be a single
    (d, s, s) patch or a batch; the feature is None without a projection head."""
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        patches = nd.reshape(patches, (1,) + arr.shape)
    feats = backbone_forward(params, buffers, config, patches, training)
    logits, probs = classify(params, feats)
    visual = project(params, feats) if "proj.w" in params else None
    if single:
        logits, probs = logits[0], probs[0]
        visual = visual[0] if visual is not None else None
    return logits, probs, visual
