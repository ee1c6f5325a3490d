"""``LGS1`` tensor container and the training checkpoint built on it.

File layout: the magic ``LGS1``, a little-endian u32 format version, then
entries until end of file.  Each entry is a u16 name length, the UTF-8 name,
a u8 rank, ``rank`` u32 dimensions and the float32 little-endian payload.

Non-numeric metadata (config JSON, hashes, mode strings) is stored as rank-1
entries of byte codes so the container stays float-only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig, DecoderParams
from .geometry import PATCH_SIZE
from .numerics import AdamState
from .optics import MaskBank, NormalizationStats

MAGIC = b"LGS1"
FORMAT_VERSION = 1
_LE32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def write_container(path, entries: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> None:
    parts = [MAGIC, struct.pack("<I", version)]
    for name, arr in entries.items():
        a = np.ascontiguousarray(arr, dtype=_LE32)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> tuple[int, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an LGS1 file")
    (version,) = struct.unpack_from("<I", data, 4)
    pos = 8
    entries: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            rank = data[pos]
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: entry {name!r} is truncated")
            entries[name] = np.frombuffer(data, _LE32, count, pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt entry table ({exc})") from exc
    return version, entries


def encode_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(a: np.ndarray) -> str:
    return bytes(np.asarray(a, dtype=np.uint8)).decode("utf-8")


@dataclass
class Checkpoint:
    decoder: DecoderParams
    bank: MaskBank
    stats: NormalizationStats
    config_hash: str = ""
    config: dict = field(default_factory=dict)
    steer: dict[str, np.ndarray] | None = None
    adam: AdamState | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def geometry(self) -> dict:
        return {"n_masks": self.bank.n_masks, "patch_size": PATCH_SIZE}

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.decoder.copy(), self.bank.copy(),
            NormalizationStats(self.stats.mean.copy(), self.stats.std.copy()),
            self.config_hash, json.loads(json.dumps(self.config)),
            None if self.steer is None else {k: v.copy() for k, v in self.steer.items()},
            None, dict(self.extra))

    def to_entries(self) -> dict[str, np.ndarray]:
        e: dict[str, np.ndarray] = {
            "meta.config_hash": encode_text(self.config_hash),
            "meta.config": encode_text(json.dumps(self.config, sort_keys=True)),
            "meta.geometry": np.array([self.bank.n_masks, PATCH_SIZE], np.float32),
            "meta.decoder": encode_text(json.dumps(
                {"n_in": self.decoder.config.n_in, "width": self.decoder.config.width,
                 "activation": self.decoder.config.activation,
                 "eps": self.decoder.config.eps})),
            "bank.logits": self.bank.logits,
            "bank.temperature": np.array([self.bank.temperature], np.float32),
            "bank.hard": np.array([self.bank.mode == "hard", self.bank.frozen], np.float32),
            "stats.mean": self.stats.mean,
            "stats.std": self.stats.std,
        }
        for name, value in self.decoder.arrays().items():
            e[f"decoder.{name}"] = value
        for name, value in (self.steer or {}).items():
            e[f"steer.{name}"] = value
        if self.adam is not None:
            a = self.adam
            e["adam.hyper"] = np.array([a.learning_rate, a.beta1, a.beta2, a.epsilon,
                                        a.step_count], np.float32)
            for k in sorted(a.first_moment):
                e[f"adam.m.{k}"] = a.first_moment[k]
                e[f"adam.v.{k}"] = a.second_moment[k]
        e.update(self.extra)
        return e

    def save(self, path) -> Path:
        write_container(path, self.to_entries())
        return Path(path)

    @classmethod
    def from_entries(cls, e: dict[str, np.ndarray]) -> "Checkpoint":
        try:
            dcfg = DecoderConfig(**json.loads(decode_text(e["meta.decoder"])))
            dec = DecoderParams(dcfg, {k[len("decoder."):]: v for k, v in e.items()
                                       if k.startswith("decoder.")})
            hard, frozen = (bool(x) for x in e["bank.hard"])
            temp = float(e["bank.temperature"][0])
            bank = MaskBank(e["bank.logits"], temp, "hard" if hard else "train", frozen)
            stats = NormalizationStats(e["stats.mean"], e["stats.std"])
            steer = {k[len("steer."):]: v for k, v in e.items() if k.startswith("steer.")}
            adam = None
            if "adam.hyper" in e:
                lr, b1, b2, eps, step = (float(x) for x in e["adam.hyper"])
                adam = AdamState(lr, b1, b2, eps, int(step))
                for k, v in e.items():
                    if k.startswith("adam.m."):
                        adam.first_moment[k[7:]] = v.copy()
                    elif k.startswith("adam.v."):
                        adam.second_moment[k[7:]] = v.copy()
            known = ("meta.", "bank.", "stats.", "decoder.", "steer.", "adam.")
            extra = {k: v for k, v in e.items() if not k.startswith(known)}
            return cls(dec, bank, stats, decode_text(e["meta.config_hash"]),
                       json.loads(decode_text(e["meta.config"])), steer or None, adam, extra)
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing entry {exc}") from exc

    @classmethod
    def load(cls, path) -> "Checkpoint":
        version, entries = read_container(path)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        return cls.from_entries(entries)

    def equals(self, other: "Checkpoint") -> bool:
        a, b = self.to_entries(), other.to_entries()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
