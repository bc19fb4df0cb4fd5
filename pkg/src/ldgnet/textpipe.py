"""Lower-cased byte-level BPE and class prompt handling."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_LEN = 76
DEFAULT_TEMPLATE = "A hyperspectral image of {class}"
DEFAULT_MERGES = 512

# GPT-2 style pre-split; merges never cross chunk boundaries.
_CHUNK = re.compile(r" ?[a-z]+| ?[0-9]+| ?[^\sa-z0-9]+|\s+(?!\S)|\s+")


def _chunks(text: str) -> list[bytes]:
    return [m.encode("utf-8") for m in _CHUNK.findall(text.lower())]


@dataclass(frozen=True)
class BpeVocab:
    merges: tuple[tuple[int, int], ...]

    @property
    def start(self) -> int:
        return 256 + len(self.merges)

    @property
    def end(self) -> int:
        return self.start + 1

    @property
    def pad(self) -> int:
        return self.start + 2

    @property
    def size(self) -> int:
        return 256 + len(self.merges) + 3

    def token_bytes(self) -> list[bytes]:
        table = [bytes([i]) for i in range(256)]
        for a, b in self.merges:
            table.append(table[a] + table[b])
        return table

    def to_json(self) -> dict:
        return {"merges": [list(m) for m in self.merges]}

    @classmethod
    def from_json(cls, obj: dict) -> "BpeVocab":
        return cls(tuple((int(a), int(b)) for a, b in obj["merges"]))


def _merge(seq: tuple[int, ...], pair: tuple[int, int], new: int) -> tuple[int, ...]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Sequence[str], merge_count: int = DEFAULT_MERGES) -> BpeVocab:
    """Greedy most-frequent-pair merges over lower-cased bytes.

    Frequency ties go to the pair whose byte strings compare smaller.  Training
    stops early once no chunk has two tokens left.
    """
    if merge_count < 0:
        raise ValueError("merge_count must be >= 0")
    if not corpus:
        raise ValueError("corpus is empty")
    words = Counter(tuple(ch) for text in corpus for ch in _chunks(text))
    table = [bytes([i]) for i in range(256)]
    merges: list[tuple[int, int]] = []
    for _ in range(merge_count):
        counts: Counter = Counter()
        for w, n in words.items():
            for pair in zip(w, w[1:]):
                counts[pair] += n
        if not counts:
            break
        best = min(counts, key=lambda p: (-counts[p], table[p[0]], table[p[1]]))
        new = len(table)
        table.append(table[best[0]] + table[best[1]])
        merges.append(best)
        words = Counter({_merge(w, best, new): n for w, n in words.items()})
    return BpeVocab(tuple(merges))


def _encode_chunk(chunk: bytes, ranks: dict[tuple[int, int], int]) -> list[int]:
    seq = tuple(chunk)
    while len(seq) > 1:
        pairs = set(zip(seq, seq[1:]))
        best = min(pairs, key=lambda p: ranks.get(p, float("inf")))
        if best not in ranks:
            break
        seq = _merge(seq, best, 256 + ranks[best])
    return list(seq)


def encode(vocab: BpeVocab, text: str, max_len: int = MAX_LEN) -> tuple[int, ...]:
    """START + merged tokens + END, suffix-truncated to ``max_len`` tokens."""
    ranks = {pair: i for i, pair in enumerate(vocab.merges)}
    body: list[int] = []
    for ch in _chunks(text):
        body.extend(_encode_chunk(ch, ranks))
    body = body[: max_len - 2]
    return (vocab.start, *body, vocab.end)


def decode(vocab: BpeVocab, seq: Sequence[int]) -> str:
    table = vocab.token_bytes()
    out = bytearray()
    for t in seq:
        t = int(t)
        if t < 0 or t >= vocab.size:
            raise ValueError(f"token id {t} outside vocabulary of size {vocab.size}")
        if t < len(table):
            out += table[t]
    return out.decode("utf-8", errors="replace")


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences. Returns (ids (N, T), key mask (N, T))."""
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# class metadata and prompts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMeta:
    id: int
    name: str
    fine: tuple[str, str]


def _check_template(template: str) -> None:
    n = template.count("{class}")
    if n != 1:
        raise ValueError(f"template must contain exactly one {{class}} placeholder, found {n}")


def build_coarse_prompt(meta: ClassMeta, template: str = DEFAULT_TEMPLATE) -> str:
    _check_template(template)
    return template.replace("{class}", meta.name)


def parse_class_meta(obj: dict) -> tuple[list[ClassMeta], str]:
    template = obj.get("coarse_template", DEFAULT_TEMPLATE)
    if not isinstance(template, str):
        raise ValueError("coarse_template must be a string")
    _check_template(template)
    entries = obj.get("classes")
    if not isinstance(entries, list) or not entries:
        raise ValueError("'classes' must be a non-empty list")
    metas = []
    for e in entries:
        cid, name, fine = e.get("id"), e.get("name"), e.get("fine")
        if not isinstance(cid, int) or isinstance(cid, bool):
            raise ValueError(f"class id must be an integer: {e!r}")
        if not isinstance(name, str) or not name.strip():
            raise ValueError(f"class {cid}: empty name")
        if not isinstance(fine, list) or len(fine) != 2:
            raise ValueError(f"class {cid} ({name}): exactly two fine texts required")
        if not all(isinstance(f, str) and f.strip() for f in fine):
            raise ValueError(f"class {cid} ({name}): fine texts must be non-empty strings")
        metas.append(ClassMeta(cid, name, (fine[0], fine[1])))
    ids = [m.id for m in metas]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate class ids in {ids}")
    if sorted(ids) != list(range(1, len(ids) + 1)):
        raise ValueError(f"class ids must be dense 1..{len(ids)}, got {sorted(ids)}")
    return sorted(metas, key=lambda m: m.id), template


def load_class_meta(path) -> tuple[list[ClassMeta], str]:
    return parse_class_meta(json.loads(Path(path).read_text(encoding="utf-8")))


def class_meta_json(metas: Sequence[ClassMeta], template: str = DEFAULT_TEMPLATE) -> dict:
    return {
        "coarse_template": template,
        "classes": [{"id": m.id, "name": m.name, "fine": list(m.fine)} for m in metas],
    }


def builtin_meta(name: str) -> tuple[list[ClassMeta], str]:
    """Bundled class texts: ``houston``, ``pavia`` or ``gid``."""
    raw = resources.files("ldgnet.data").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return parse_class_meta(json.loads(raw))


def prompt_corpus(metas: Sequence[ClassMeta], template: str) -> list[str]:
    texts = []
    for m in metas:
        texts.append(build_coarse_prompt(m, template))
        texts.extend(m.fine)
    return texts


_REGIONS = ("violet", "blue", "green", "red", "near infrared", "shortwave infrared")


def synthetic_class_meta(means: np.ndarray) -> list[ClassMeta]:
    """Describe (classes, bands) mean spectra in words: where each curve peaks
    and dips, and how bright and how sloped it is overall."""
    means = np.asarray(means, dtype=np.float64)
    classes, bands = means.shape

    def region(band: int) -> str:
        return _REGIONS[min(len(_REGIONS) - 1, band * len(_REGIONS) // bands)]

    overall = means.mean(axis=1)
    lo, hi = np.quantile(overall, [1 / 3, 2 / 3]) if classes > 1 else (overall[0], overall[0])
    metas = []
    for c, curve in enumerate(means):
        level = "dark" if overall[c] < lo else "bright" if overall[c] > hi else "moderately bright"
        half = bands // 2
        slope = curve[half:].mean() - curve[:half].mean()
        trend = "rises toward" if slope > 0.02 else "falls toward" if slope < -0.02 else "stays flat into"
        fine = (
            f"A {level} surface whose reflectance peaks in the {region(int(curve.argmax()))} bands",
            f"Its spectrum dips in the {region(int(curve.argmin()))} bands and {trend} the long wavelengths",
        )
        metas.append(ClassMeta(c + 1, f"material {c + 1}", fine))
    return metas
