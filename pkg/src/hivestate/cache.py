"""Binary feature-cache files and the on-disk cache directory.

File layout (little-endian): magic ``HIVF``, u32 version, u32 rows, u32 cols,
u8 band kind, f64 frame hop in seconds, then rows*cols f32 values row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
from pathlib import Path
from typing import Callable

import numpy as np

from .spectral import BandKind, FeatureMatrix

MAGIC = b"HIVF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIBd")


class CacheFormatError(Exception):
    pass


def write_feature(path: str | os.PathLike, m: FeatureMatrix) -> None:
    rows, cols = m.shape
    tmp = Path(f"{os.fspath(path)}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols, int(m.band_kind), float(m.frame_hop_s)))
        fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_feature(path: str | os.PathLike) -> FeatureMatrix:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CacheFormatError(f"{path}: truncated header")
        magic, version, rows, cols, kind, hop = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CacheFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheFormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != rows * cols * 4:
        raise CacheFormatError(f"{path}: expected {rows * cols} values, found {len(payload) // 4}")
    try:
        band_kind = BandKind(kind)
    except ValueError:
        raise CacheFormatError(f"{path}: unknown band kind {kind}") from None
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return FeatureMatrix(data, band_kind, hop)


class FeatureCache:
    """Directory of HIVF files keyed by (audio path, feature kind).

    An entry is fresh while the audio file's size and mtime and the kind's
    version tag match what was recorded when it was written.
    """

    INDEX = "index.json"

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        index_path = self.root / self.INDEX
        self._index: dict[str, dict] = {}
        if index_path.exists():
            try:
                self._index = json.loads(index_path.read_text())
            except json.JSONDecodeError:
                self._index = {}

    @staticmethod
    def _key(audio_path: str, kind: str) -> str:
        return f"{os.path.abspath(audio_path)}::{kind}"

    def file_for(self, audio_path: str, kind: str) -> Path:
        digest = hashlib.sha1(self._key(audio_path, kind).encode()).hexdigest()[:16]
        safe_kind = "".join(c if c.isalnum() or c in "-_" else "_" for c in kind)
        return self.root / f"{Path(audio_path).stem}.{digest}.{safe_kind}.hivf"

    @staticmethod
    def _stamp(audio_path: str, tag: str) -> dict:
        st = os.stat(audio_path)
        return {"size": st.st_size, "mtime_ns": st.st_mtime_ns, "tag": tag}

    def is_fresh(self, audio_path: str, kind: str, tag: str) -> bool:
        rec = self._index.get(self._key(audio_path, kind))
        if rec is None or not self.file_for(audio_path, kind).exists():
            return False
        try:
            return rec == self._stamp(audio_path, tag)
        except OSError:
            return False

    def has_file(self, audio_path: str, kind: str) -> bool:
        return self.file_for(audio_path, kind).exists()

    def load(self, audio_path: str, kind: str) -> FeatureMatrix:
        return read_feature(self.file_for(audio_path, kind))

    def store(self, audio_path: str, kind: str, tag: str, m: FeatureMatrix) -> None:
        write_feature(self.file_for(audio_path, kind), m)
        with self._lock:
            self._index[self._key(audio_path, kind)] = self._stamp(audio_path, tag)

    def get_or_compute(self, audio_path: str, kind: str, tag: str,
                       compute: Callable[[], FeatureMatrix]) -> tuple[FeatureMatrix, bool]:
        """Return ``(matrix, computed)``."""
        if self.is_fresh(audio_path, kind, tag):
            return self.load(audio_path, kind), False
        m = compute()
        self.store(audio_path, kind, tag, m)
        # hand back the f32-rounded values so cold and warm runs see identical inputs
        return self.load(audio_path, kind), True

    def flush(self) -> None:
        with self._lock:
            tmp = self.root / (self.INDEX + ".tmp")
            tmp.write_text(json.dumps(self._index, indent=1, sort_keys=True))
            os.replace(tmp, self.root / self.INDEX)
