"""Frozen-feature extraction into an append-only binary feature store.

File layout (little-endian)::

    magic "BROWFEAT" | u32 version | u32 dim | u64 row_count | u32 dtype code (0 = float32)
    row_count * dim float32 values, row-major
    u64 index byte length | UTF-8 JSON list of [source_id, level, x, y] per row
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..backbone import VisionTransformer
from ..pyramid import PyramidManifest, iter_tiles
from ..views import resize, to_tensor

MAGIC = b"BROWFEAT"
VERSION = 1
_HEADER = struct.Struct("<8sIIQI")


class FeatureStoreError(ValueError):
    pass


@dataclass(frozen=True)
class RowIndex:
    source_id: str
    level: int
    origin: tuple[int, int]


class FeatureStore:
    """In-memory append-only embedding matrix with a per-row provenance index."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise FeatureStoreError("dim must be positive")
        self.dim = dim
        self._rows: list[np.ndarray] = []
        self.index: list[RowIndex] = []

    def __len__(self) -> int:
        return len(self.index)

    @property
    def row_count(self) -> int:
        return len(self.index)

    def append(self, vectors: np.ndarray, index: list[RowIndex]) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim == 1:
            vectors = vectors[None]
        if vectors.shape[1] != self.dim:
            raise FeatureStoreError(f"dimension mismatch: store has {self.dim}, got {vectors.shape[1]}")
        if len(index) != len(vectors):
            raise FeatureStoreError("index length differs from number of vectors")
        self._rows.extend(np.array(v) for v in vectors)
        self.index.extend(index)

    def write(self, i: int, vector: np.ndarray, entry: RowIndex) -> None:
        """Write row ``i``; only the next unwritten row may be written."""
        if i < self.row_count:
            raise FeatureStoreError(f"row {i} already written; the store is append-only")
        if i > self.row_count:
            raise FeatureStoreError(f"row {i} leaves a gap after row {self.row_count - 1}")
        self.append(vector, [entry])

    def read(self, i: int) -> np.ndarray:
        return self._rows[i].copy()

    def matrix(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack(self._rows)

    def source_ids(self) -> list[str]:
        return [r.source_id for r in self.index]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index = json.dumps([[r.source_id, r.level, r.origin[0], r.origin[1]] for r in self.index],
                           separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.dim, self.row_count, 0))
            fh.write(self.matrix().astype("<f4").tobytes())
            fh.write(struct.pack("<Q", len(index)))
            fh.write(index)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStore":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise FeatureStoreError(f"{path}: truncated header")
        magic, version, dim, rows, dtype = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FeatureStoreError(f"{path}: bad magic {magic!r}")
        if version != VERSION or dtype != 0:
            raise FeatureStoreError(f"{path}: unsupported version {version} / dtype {dtype}")
        off = _HEADER.size
        nbytes = rows * dim * 4
        matrix = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
        off += nbytes
        (n_index,) = struct.unpack_from("<Q", data, off)
        raw = json.loads(data[off + 8:off + 8 + n_index].decode("utf-8"))
        if len(raw) != rows:
            raise FeatureStoreError(f"{path}: index has {len(raw)} rows, header says {rows}")
        store = cls(dim)
        store.append(matrix.astype(np.float32), [RowIndex(s, lv, (x, y)) for s, lv, x, y in raw])
        return store


def merge_stores(stores: list[FeatureStore]) -> FeatureStore:
    """Concatenate shards in the given order."""
    if not stores:
        raise FeatureStoreError("nothing to merge")
    out = FeatureStore(stores[0].dim)
    for s in stores:
        out.append(s.matrix(), list(s.index))
    return out


@torch.no_grad()
def embed_images(encoder: VisionTransformer, images: list[torch.Tensor], batch_size: int = 64) -> np.ndarray:
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    for i in range(0, len(images), batch_size):
        batch = torch.stack(images[i:i + batch_size]).to(dtype)
        out.append(encoder(batch).float().numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.embed_dim), dtype=np.float32)


def extract_features(encoder: VisionTransformer, manifest: PyramidManifest, level: int = 0,
                     out: FeatureStore | None = None, batch_size: int = 64) -> FeatureStore:
    """Embed every full tile of every slide at ``level`` in manifest order."""
    store = out if out is not None else FeatureStore(encoder.embed_dim)
    if store.dim != encoder.embed_dim:
        raise FeatureStoreError(f"store dim {store.dim} != encoder dim {encoder.embed_dim}")
    size = encoder.cfg.image_size
    images, index = [], []

    def flush():
        if images:
            store.append(embed_images(encoder, images, batch_size), list(index))
            images.clear()
            index.clear()

    for patch in iter_tiles(manifest, level):
        images.append(resize(to_tensor(patch.pixels), size))
        index.append(RowIndex(patch.source_id, patch.level, patch.origin))
        if len(images) >= batch_size:
            flush()
    flush()
    return store
