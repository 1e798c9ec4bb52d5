"""Global-descriptor database with exact nearest-neighbour queries.

Search is brute force over all stored vectors.  Keyframes within ``window``
sequence steps of the query are never returned, which keeps trivially
co-located neighbours out of the candidate lists.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateKeyframe,
    EmptyStore,
    IoFailure,
    SchemaViolation,
    UnknownKeyframe,
)

DEFAULT_WINDOW = 10

BINARY_MAGIC = b"VPRD"
BINARY_VERSION = 1


@dataclass(frozen=True)
class MatchCandidate:
    query_id: int
    candidate_id: int
    distance: float


def distance(a, b) -> float:
    """Euclidean distance between two equal-length vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _row_distances(vectors, q):
    # same arithmetic as distance(), applied row by row
    return np.sqrt(np.sum((vectors - q) ** 2, axis=1))


class DescriptorStore:
    """Keyframe-indexed descriptor vectors of one fixed dimension.

    Parameters
    ----------
    dim : int
        Descriptor dimension ``D``.
    normalize : bool
        If set, vectors are scaled to unit L2 norm on insert.
    """

    def __init__(self, dim, normalize=False):
        if dim < 1:
            raise DimensionMismatch("descriptor dimension must be >= 1")
        self.dim = int(dim)
        self.normalize = normalize
        self._ids: list[int] = []
        self._rows: list[np.ndarray] = []
        self._index: dict[int, int] = {}
        self._matrix = None

    @classmethod
    def from_arrays(cls, ids, vectors, normalize=False):
        vectors = np.asarray(vectors, dtype=float)
        if vectors.ndim != 2:
            raise DimensionMismatch("expected an (N, D) array of descriptors")
        store = cls(vectors.shape[1], normalize=normalize)
        for kf, v in zip(ids, vectors):
            store.insert(int(kf), v)
        return store

    def __len__(self):
        return len(self._ids)

    def __contains__(self, keyframe_id):
        return keyframe_id in self._index

    @property
    def ids(self):
        return np.array(self._ids, dtype=np.int64)

    @property
    def vectors(self):
        if self._matrix is None:
            self._matrix = np.array(self._rows).reshape(len(self._rows), self.dim)
        return self._matrix

    def vector(self, keyframe_id):
        try:
            return self._rows[self._index[keyframe_id]]
        except KeyError:
            raise UnknownKeyframe(keyframe_id) from None

    def insert(self, keyframe_id, vector):
        keyframe_id = int(keyframe_id)
        if keyframe_id < 0:
            raise ValueError("keyframe ids must be >= 0")
        v = np.array(vector, dtype=float).reshape(-1)
        if v.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dimension {self.dim}, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor contains NaN or Inf")
        if keyframe_id in self._index:
            raise DuplicateKeyframe(keyframe_id)
        if self.normalize:
            n = np.linalg.norm(v)
            if n > 0:
                v = v / n
        v.setflags(write=False)
        self._index[keyframe_id] = len(self._ids)
        self._ids.append(keyframe_id)
        self._rows.append(v)
        self._matrix = None
        return self

    def distances_from(self, keyframe_id):
        q = self.vector(keyframe_id)
        return _row_distances(self.vectors, q)

    def query(self, keyframe_id, k, window=DEFAULT_WINDOW):
        """Up to ``k`` nearest keyframes more than ``window`` steps away.

        Sorted by ascending distance, ties broken by ascending keyframe id.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if window < 0:
            raise ValueError("window must be >= 0")
        d = self.distances_from(keyframe_id)
        ids = self.ids
        eligible = np.abs(ids - keyframe_id) > window
        ids, d = ids[eligible], d[eligible]
        order = np.lexsort((ids, d))[:k]
        return [MatchCandidate(int(keyframe_id), int(ids[i]), float(d[i])) for i in order]

    def similarity_matrix(self):
        """Pairwise L2 distance matrix in insertion order."""
        n = len(self)
        if n == 0:
            raise EmptyStore("no descriptors stored")
        V = self.vectors
        out = np.zeros((n, n))
        for i in range(n - 1):
            row = _row_distances(V[i + 1 :], V[i])
            out[i, i + 1 :] = row
            out[i + 1 :, i] = row
        return out


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def write_csv(store: DescriptorStore, path):
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["keyframe_id"] + [f"v{i}" for i in range(store.dim)])
    for kf, v in zip(store.ids, store.vectors):
        writer.writerow([int(kf)] + [repr(float(x)) for x in v])
    try:
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_csv(path, normalize=False) -> DescriptorStore:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaViolation("empty descriptor file")
    header = rows[0]
    dim = len(header) - 1
    if header[0] != "keyframe_id" or header[1:] != [f"v{i}" for i in range(dim)]:
        raise SchemaViolation("descriptor CSV header must be keyframe_id,v0,...,v{D-1}")
    store = DescriptorStore(dim, normalize=normalize)
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise SchemaViolation(f"line {line_no}: expected {dim + 1} fields")
        try:
            store.insert(int(row[0]), [float(x) for x in row[1:]])
        except ValueError as exc:
            if isinstance(exc, (DuplicateKeyframe, DimensionMismatch)):
                raise
            raise SchemaViolation(f"line {line_no}: {exc}") from exc
    return store


def write_binary(store: DescriptorStore, path):
    n, dim = len(store), store.dim
    rec = np.dtype([("id", "<u8"), ("v", "<f8", (dim,))])
    arr = np.empty(n, dtype=rec)
    arr["id"] = store.ids
    arr["v"] = store.vectors
    header = BINARY_MAGIC + struct.pack("<III", BINARY_VERSION, dim, n)
    try:
        Path(path).write_bytes(header + arr.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_binary(path, normalize=False) -> DescriptorStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(data) < 16 or data[:4] != BINARY_MAGIC:
        raise SchemaViolation("not a VPRD descriptor file")
    version, dim, n = struct.unpack("<III", data[4:16])
    if version != BINARY_VERSION:
        raise SchemaViolation(f"unsupported VPRD version {version}")
    rec = np.dtype([("id", "<u8"), ("v", "<f8", (dim,))])
    if len(data) != 16 + n * rec.itemsize:
        raise SchemaViolation("VPRD payload size does not match header")
    arr = np.frombuffer(data, dtype=rec, count=n, offset=16)
    return DescriptorStore.from_arrays(arr["id"].astype(np.int64), arr["v"], normalize=normalize)


def load_descriptors(path, normalize=False) -> DescriptorStore:
    """Read either format, dispatching on the magic bytes."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if head == BINARY_MAGIC:
        return read_binary(path, normalize=normalize)
    return read_csv(path, normalize=normalize)
