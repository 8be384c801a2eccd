"""Class-wise style banks: in-memory model, binary persistence and sampling.

File layout (all integers little-endian)::

    magic        8 bytes  b"FAMIXBNK"
    version      u16
    channels     u32
    num_classes  u32
    meta_len     u32
    meta         meta_len bytes of canonical JSON (class names + mining metadata)
    header_crc   u32      CRC-32 of every byte above
    counts       num_classes x u32
    entries      per class, per entry:
                   mu      channels x float32
                   sigma   channels x float32
                   prompt  u32 length + UTF-8
                   source  u32 length + UTF-8
    payload_crc  u32      CRC-32 of counts and entries
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from famix.errors import BankLoadError, ConfigurationError, MissingStyleError, ShapeError
from famix.stats import EPS_SIGMA, SeedLike, StyleStats, as_rng

MAGIC = b"FAMIXBNK"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sHIII")
_U32 = struct.Struct("<I")
FALLBACKS = ("error", "skip")


@dataclass
class BankEntry:
    mu: np.ndarray
    sigma: np.ndarray
    prompt: str = ""
    source_id: str = ""

    def __post_init__(self):
        self.mu = np.ascontiguousarray(np.asarray(self.mu, dtype=np.float32))
        self.sigma = np.ascontiguousarray(np.asarray(self.sigma, dtype=np.float32))

    def style(self) -> StyleStats:
        return StyleStats(torch.from_numpy(self.mu.copy()), torch.from_numpy(self.sigma.copy()))

    def __eq__(self, other):
        if not isinstance(other, BankEntry):
            return NotImplemented
        return (np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)
                and self.prompt == other.prompt and self.source_id == other.source_id)


@dataclass
class StyleBank:
    """``entries[k]`` holds the styles mined for class ``k``."""

    class_names: list
    channels: int
    entries: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_names = list(self.class_names)
        if not self.entries:
            self.entries = [[] for _ in self.class_names]

    @classmethod
    def empty(cls, class_names, channels: int, **metadata) -> "StyleBank":
        return cls(list(class_names), channels, metadata=dict(metadata))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def is_global(self) -> bool:
        return self.metadata.get("scope") == "global"

    def __len__(self):
        return sum(len(e) for e in self.entries)

    def counts(self) -> list:
        return [len(e) for e in self.entries]

    def add(self, class_id: int, entry: BankEntry) -> None:
        if not 0 <= class_id < self.num_classes:
            raise ShapeError(f"class id {class_id} outside [0, {self.num_classes - 1}]")
        if entry.mu.shape != (self.channels,) or entry.sigma.shape != (self.channels,):
            raise ShapeError(f"entry has {entry.mu.shape} channels, bank expects ({self.channels},)")
        self.entries[class_id].append(entry)

    def validate(self) -> None:
        """Raise :class:`BankLoadError` naming the first entry breaking an invariant."""
        if len(self.entries) != self.num_classes:
            raise BankLoadError(f"{len(self.entries)} entry lists for {self.num_classes} classes")
        for k, items in enumerate(self.entries):
            for i, e in enumerate(items):
                where = f"class {k} ({self.class_names[k]!r}) entry {i}"
                if e.mu.shape != (self.channels,) or e.sigma.shape != (self.channels,):
                    raise BankLoadError(f"{where}: channel length {e.mu.shape[0]} != {self.channels}")
                if not (np.isfinite(e.mu).all() and np.isfinite(e.sigma).all()):
                    raise BankLoadError(f"{where}: non-finite statistics")
                bad = np.flatnonzero(e.sigma < np.float32(EPS_SIGMA))
                if bad.size:
                    j = int(bad[0])
                    raise BankLoadError(f"{where}: sigma[{j}]={float(e.sigma[j])!r} below {EPS_SIGMA}")

    def class_arrays(self, k: int):
        """Stacked ``(n, C)`` float32 mu and sigma for class ``k``."""
        items = self.entries[k]
        if not items:
            empty = np.zeros((0, self.channels), dtype=np.float32)
            return empty, empty.copy()
        return np.stack([e.mu for e in items]), np.stack([e.sigma for e in items])

    def __eq__(self, other):
        if not isinstance(other, StyleBank):
            return NotImplemented
        return (self.class_names == other.class_names and self.channels == other.channels
                and self.metadata == other.metadata and self.entries == other.entries)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode()


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def encode_bank(bank: StyleBank, validate: bool = True) -> bytes:
    if validate:
        bank.validate()
    meta = _canonical_json({"class_names": bank.class_names, "metadata": bank.metadata})
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, bank.channels, bank.num_classes, len(meta)) + meta
    head += _U32.pack(zlib.crc32(head))
    body = bytearray()
    for items in bank.entries:
        body += _U32.pack(len(items))
    for items in bank.entries:
        for e in items:
            body += e.mu.astype("<f4").tobytes()
            body += e.sigma.astype("<f4").tobytes()
            body += _pack_str(e.prompt)
            body += _pack_str(e.source_id)
    return head + bytes(body) + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise BankLoadError(f"truncated file while reading {what} (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def string(self, what: str) -> str:
        raw = self.take(self.u32(what + " length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BankLoadError(f"{what} is not valid UTF-8") from exc


def decode_bank(data: bytes) -> StyleBank:
    r = _Reader(data)
    magic, version, channels, num_classes, meta_len = _HEAD.unpack(r.take(_HEAD.size, "header"))
    if magic != MAGIC:
        raise BankLoadError(f"not a style bank file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise BankLoadError(f"unsupported bank format version {version} (expected {FORMAT_VERSION})")
    meta_raw = r.take(meta_len, "metadata")
    crc = r.u32("header checksum")
    if crc != zlib.crc32(data[:r.pos - 4]):
        raise BankLoadError("header checksum mismatch")
    meta = json.loads(meta_raw.decode("utf-8"))
    class_names = meta.get("class_names")
    if not isinstance(class_names, list) or len(class_names) != num_classes:
        raise BankLoadError(f"header declares {num_classes} classes but names {class_names!r}")
    if channels < 1:
        raise BankLoadError("header declares zero channels")
    body_start = r.pos
    counts = [r.u32(f"entry count of class {k}") for k in range(num_classes)]
    bank = StyleBank(class_names, channels, metadata=meta.get("metadata", {}))
    width = 4 * channels
    for k, n in enumerate(counts):
        for i in range(n):
            where = f"class {k} entry {i}"
            mu = np.frombuffer(r.take(width, where + " mu"), dtype="<f4").astype(np.float32)
            sigma = np.frombuffer(r.take(width, where + " sigma"), dtype="<f4").astype(np.float32)
            prompt = r.string(where + " prompt")
            source = r.string(where + " source id")
            bank.entries[k].append(BankEntry(mu, sigma, prompt, source))
    body_end = r.pos
    crc = r.u32("payload checksum")
    if crc != zlib.crc32(data[body_start:body_end]):
        raise BankLoadError("payload checksum mismatch")
    if r.pos != len(data):
        raise BankLoadError(f"{len(data) - r.pos} trailing bytes after payload")
    bank.validate()
    return bank


def save_bank(bank: StyleBank, path) -> Path:
    path = Path(path)
    data = encode_bank(bank)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_bank(path) -> StyleBank:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BankLoadError(f"cannot read bank file {path}: {exc}") from exc
    return decode_bank(data)


def sample_style(bank: StyleBank, class_id: int, seed: SeedLike = None,
                 fallback: str = "error") -> Optional[StyleStats]:
    """Uniformly draw one style of ``class_id``.

    With ``fallback="skip"`` an empty class returns ``None`` so the caller
    can leave the patch unstylised.
    """
    if fallback not in FALLBACKS:
        raise ConfigurationError(f"fallback must be one of {FALLBACKS}")
    items = bank.entries[class_id]
    if not items:
        if fallback == "skip":
            return None
        raise MissingStyleError(f"no mined style for class {class_id} ({bank.class_names[class_id]!r})")
    return items[int(as_rng(seed).integers(len(items)))].style()
