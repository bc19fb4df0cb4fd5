"""The dual-encoder model container and its LDGM1 file format.

LDGM1 layout::

    b"LDGM1\\n"
    JSON list of {"name", "shape", "byte_offset"} entries, one line
    b"\\n"
    little-endian float32 payloads, concatenated in manifest order

Structural integers (encoder sizes, BPE merges) travel as ``meta`` tensors so
the manifest keeps its plain list form.  Everything belonging to the text side
lives under the ``txt.`` prefix and may be absent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imenc, txtenc
from .hsidata import atomic_write_bytes
from .imenc import ImageEncoderConfig
from .losses import Temperature
from .ndgrad import Tensor
from .textpipe import BpeVocab
from .txtenc import TextEncoderConfig

MAGIC = b"LDGM1\n"
TEXT_PREFIX = "txt."


class ModelFormatError(ValueError):
    pass


@dataclass
class LDGModel:
    img_config: ImageEncoderConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    txt_config: TextEncoderConfig | None = None
    vocab: BpeVocab | None = None
    temperature: Temperature | None = None
    normalize_input: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def has_text(self) -> bool:
        return self.txt_config is not None and any(k.startswith(TEXT_PREFIX) for k in self.params)

    @property
    def has_proj(self) -> bool:
        return "proj.w" in self.params

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.temperature is not None:
            out["align.theta"] = self.temperature.theta
        return out

    def image_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("img.", "cls."))]

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {k: t.data.copy() for k, t in self.trainable().items()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.trainable().items():
            t.data = state[k].copy()
        for k in self.buffers:
            self.buffers[k][...] = state[f"buffer:{k}"]


def build_model(
    img_config: ImageEncoderConfig,
    seed: int,
    txt_config: TextEncoderConfig | None = None,
    vocab: BpeVocab | None = None,
    normalize_input: bool = True,
) -> LDGModel:
    """Fresh model. Without a text config the projection head and temperature
    are omitted too (classification-only variant)."""
    with_text = txt_config is not None
    params, buffers = imenc.init_image_encoder(img_config, seed, with_proj=with_text)
    temperature = None
    if with_text:
        if txt_config.d_sem != img_config.d_sem:
            raise ValueError("image and text encoders must share d_sem")
        params.update(txtenc.init_text_encoder(txt_config, seed))
        temperature = Temperature()
    return LDGModel(img_config, params, buffers, txt_config, vocab, temperature, normalize_input)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def _img_meta(m: LDGModel) -> np.ndarray:
    c = m.img_config
    return np.array(
        [c.patch, c.bands, *c.widths, c.kernel, c.d_sem, c.classes, c.pool, int(m.normalize_input)],
        dtype=np.float64,
    )


def _txt_meta(c: TextEncoderConfig) -> np.ndarray:
    return np.array(
        [c.layers, c.width, c.heads, c.max_len, c.vocab_size, c.d_sem, int(c.causal)],
        dtype=np.float64,
    )


def model_tensors(m: LDGModel) -> list[tuple[str, np.ndarray]]:
    items: list[tuple[str, np.ndarray]] = [("meta.img", _img_meta(m))]
    if m.has_text:
        items.append(("txt.meta", _txt_meta(m.txt_config)))
        merges = np.array(m.vocab.merges if m.vocab else [], dtype=np.float64).reshape(-1, 2)
        items.append(("txt.meta.merges", merges))
    items.extend((k, t.data) for k, t in m.params.items())
    items.extend((k, v) for k, v in m.buffers.items())
    if m.temperature is not None:
        items.append(("align.theta", m.temperature.theta.data.reshape(1)))
    return items


def encode_tensors(items: list[tuple[str, np.ndarray]]) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in items:
        raw = np.asarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    line = json.dumps(manifest, separators=(",", ":")).encode()
    return MAGIC + line + b"\n" + b"".join(chunks)


def decode_tensors(raw: bytes) -> dict[str, np.ndarray]:
    if not raw.startswith(MAGIC):
        raise ModelFormatError("bad magic: not an LDGM1 model file")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ModelFormatError("missing manifest line")
    try:
        manifest = json.loads(rest[:nl])
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"bad manifest: {e}") from e
    payload = rest[nl + 1:]
    out: dict[str, np.ndarray] = {}
    expect = 0
    for entry in manifest:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["byte_offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off != expect or off + nbytes > len(payload):
            raise ModelFormatError(f"tensor {name!r} lies outside the payload")
        out[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float64).reshape(shape)
        expect = off + nbytes
    if expect != len(payload):
        raise ModelFormatError("payload size does not match the manifest")
    return out


def save_model(m: LDGModel, path) -> None:
    atomic_write_bytes(path, encode_tensors(model_tensors(m)))


def model_from_tensors(t: dict[str, np.ndarray]) -> LDGModel:
    if "meta.img" not in t:
        raise ModelFormatError("model file lacks meta.img")
    mi = [int(round(x)) for x in t["meta.img"]]
    img_config = ImageEncoderConfig(
        patch=mi[0], bands=mi[1], widths=(mi[2], mi[3]), kernel=mi[4], d_sem=mi[5],
        classes=mi[6], pool=mi[7],
    )
    txt_config = vocab = None
    if "txt.meta" in t:
        mt = [int(round(x)) for x in t["txt.meta"]]
        txt_config = TextEncoderConfig(
            layers=mt[0], width=mt[1], heads=mt[2], max_len=mt[3], vocab_size=mt[4],
            d_sem=mt[5], causal=bool(mt[6]),
        )
        merges = t.get("txt.meta.merges", np.zeros((0, 2)))
        vocab = BpeVocab(tuple((int(a), int(b)) for a, b in merges))
    skeleton, buffers = imenc.init_image_encoder(img_config, 0, with_proj="proj.w" in t)
    if txt_config is not None:
        skeleton.update(txtenc.init_text_encoder(txt_config, 0))
    params: dict[str, Tensor] = {}
    for name, ref in skeleton.items():
        if name not in t:
            raise ModelFormatError(f"missing tensor {name!r}")
        if t[name].shape != ref.shape:
            raise ModelFormatError(f"tensor {name!r} has shape {t[name].shape}, expected {ref.shape}")
        params[name] = Tensor(t[name], requires_grad=True)
    for name in buffers:
        if name not in t:
            raise ModelFormatError(f"missing buffer {name!r}")
        buffers[name] = t[name].copy()
    temperature = None
    if "align.theta" in t:
        temperature = Temperature(float(t["align.theta"][0]))
    return LDGModel(img_config, params, buffers, txt_config, vocab, temperature, bool(mi[8]))


def load_model(path) -> LDGModel:
    return model_from_tensors(decode_tensors(Path(path).read_bytes()))


def strip_prefix(raw: bytes, prefix: str = TEXT_PREFIX) -> bytes:
    """Re-encode a model file without the tensors under ``prefix``."""
    kept = [(k, v) for k, v in decode_tensors(raw).items() if not k.startswith(prefix)]
    return encode_tensors(kept)
