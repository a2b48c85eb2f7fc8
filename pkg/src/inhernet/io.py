"""Deterministic persistence and data generation.

Checkpoint container layout (all integers little-endian):

    offset  size  contents
    0       8     magic ``INHERNET``
    8       4     format version (u32, currently 1)
    12      8     manifest byte count (u64)
    20      ...   manifest: UTF-8 JSON describing layer topology, shapes,
                  enums, and any extra metadata
    ...     ...   blob: concatenated little-endian float64 arrays in
                  manifest-declared order

The blob length must equal the sum of declared parameter counts times 8;
loading a saved network restores every parameter bit-exactly. Synthetic
tasks regenerate bit-identically from ``(kind, seed, sizes)`` because all
draws flow through the counter-based generator.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import CorruptionError, FormatError, ParseError, RangeError, ShapeError
from .inherit import InherConv2DLayer, InherNetLayer, InverseLayer, SymmetricLayer
from .nn import Conv2DLayer, DenseLayer, Layer, Network, ReluLayer

MAGIC = b"INHERNET"
VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """A batch of inputs with regression targets or integer class labels."""

    x: np.ndarray
    y: np.ndarray
    kind: str  # "regression" | "classification"

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise RangeError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class SyntheticTask:
    """Generator settings for a desk-scale task; regeneration is bit-exact."""

    kind: str          # "blobs" | "piecewise" | "mimic"
    seed: int
    n: int
    dim: int
    classes: int = 2   # classes (blobs) or clusters (piecewise)
    out_dim: int = 1   # target width for piecewise tasks
    noise: float = 0.0
    separation: float = 3.0
    per_class: int = 1  # Gaussian blobs per class; labels repeat across blobs
    map_rank: int = 0   # rank of each piecewise cluster map (0 = full rank)

    def __post_init__(self):
        if self.kind not in ("blobs", "piecewise", "mimic"):
            raise RangeError(f"unknown task kind {self.kind!r}")
        if self.n < 2 or self.dim < 1 or self.classes < 1 or self.per_class < 1:
            raise RangeError(f"task sizes must be positive, got {self}")


def gen_synthetic(task: SyntheticTask, teacher: Network | None = None):
    """Generate a task and split it 80/20 by a seeded permutation."""
    gen = _rng.philox(task.seed, _rng.STREAM_DATA)
    if task.kind == "blobs":
        k = task.classes * task.per_class
        centers = gen.standard_normal((k, task.dim)) * task.separation
        cluster = gen.integers(0, k, size=task.n)
        x = centers[cluster] + gen.standard_normal((task.n, task.dim))
        y = (cluster % task.classes).astype(np.int64)
        kind = "classification"
    elif task.kind == "piecewise":
        centers = gen.standard_normal((task.classes, task.dim)) * task.separation
        maps = gen.standard_normal((task.classes, task.dim, task.out_dim)) / np.sqrt(task.dim)
        if task.map_rank > 0:
            # project each cluster map onto its top singular directions
            for c in range(task.classes):
                u, s, vt = np.linalg.svd(maps[c], full_matrices=False)
                s[task.map_rank:] = 0.0
                maps[c] = (u * s) @ vt
        offsets = gen.standard_normal((task.classes, task.out_dim))
        assign = gen.integers(0, task.classes, size=task.n)
        x = centers[assign] + gen.standard_normal((task.n, task.dim))
        y = np.einsum("bd,bdo->bo", x, maps[assign]) + offsets[assign]
        if task.noise > 0:
            y = y + task.noise * gen.standard_normal(y.shape)
        kind = "regression"
    else:
        if teacher is None:
            raise RangeError("mimic task requires a teacher network")
        x = gen.standard_normal((task.n, task.dim))
        y = teacher.forward(x)
        if task.noise > 0:
            y = y + task.noise * gen.standard_normal(y.shape)
        kind = "regression"
    perm = _rng.philox(task.seed, _rng.STREAM_SPLIT).permutation(task.n)
    n_eval = max(1, task.n // 5)
    ev, tr = perm[:n_eval], perm[n_eval:]
    return (Dataset(x=x[tr], y=y[tr], kind=kind),
            Dataset(x=x[ev], y=y[ev], kind=kind))


# --- checkpoint serialization ------------------------------------------------

def _layer_manifest(layer: Layer) -> dict:
    entry: dict = {"arrays": [{"name": k, "shape": list(v.shape)}
                              for k, v in layer.params.items()]}
    if isinstance(layer, DenseLayer):
        entry["kind"] = "dense"
    elif isinstance(layer, ReluLayer):
        entry["kind"] = "relu"
    elif isinstance(layer, Conv2DLayer):
        entry["kind"] = "conv2d"
        entry["stride"] = layer.stride
        entry["padding"] = layer.padding
    elif isinstance(layer, InherNetLayer):
        entry["kind"] = "inherit_dense"
        entry["gate_input"] = layer.gate_input
        entry["n_heads"] = layer.n_heads
        entry["has_head_bias"] = layer.has_head_bias
        entry["gate_frozen"] = layer.gate_frozen
    elif isinstance(layer, InherConv2DLayer):
        entry["kind"] = "inherit_conv"
        entry["stride"] = layer.stride
        entry["padding"] = layer.padding
        entry["n_heads"] = layer.n_heads
        entry["has_head_bias"] = layer.has_head_bias
        entry["gate_frozen"] = layer.gate_frozen
    elif isinstance(layer, InverseLayer):
        entry["kind"] = "inverse"
        entry["n_heads"] = layer.n_heads
    elif isinstance(layer, SymmetricLayer):
        entry["kind"] = "symmetric"
    else:
        raise FormatError(f"cannot serialize layer type {type(layer).__name__}")
    return entry


def _build_layer(entry: dict, arrays: dict[str, np.ndarray]) -> Layer:
    kind = entry["kind"]
    if kind == "dense":
        return DenseLayer(arrays["weight"], arrays.get("bias"))
    if kind == "relu":
        return ReluLayer()
    if kind == "conv2d":
        return Conv2DLayer(arrays["kernel"], entry["stride"], entry["padding"],
                           arrays.get("bias"))
    if kind == "inherit_dense":
        h = entry["n_heads"]
        return InherNetLayer(
            w_down=arrays["w_down"],
            heads=[arrays[f"head_{i}"] for i in range(h)],
            gate_weight=arrays.get("gate_weight", np.zeros((0, 0))),
            gate_bias=arrays.get("gate_bias", np.zeros(0)),
            gate_input=entry["gate_input"],
            head_bias=([arrays[f"head_bias_{i}"] for i in range(h)]
                       if entry["has_head_bias"] else None),
            gate_frozen=entry["gate_frozen"])
    if kind == "inherit_conv":
        h = entry["n_heads"]
        return InherConv2DLayer(
            shared_kernel=arrays["shared_kernel"],
            heads=[arrays[f"head_{i}"] for i in range(h)],
            gate_weight=arrays.get("gate_weight", np.zeros((0, 0))),
            gate_bias=arrays.get("gate_bias", np.zeros(0)),
            stride=entry["stride"], padding=entry["padding"],
            head_bias=([arrays[f"head_bias_{i}"] for i in range(h)]
                       if entry["has_head_bias"] else None),
            gate_frozen=entry["gate_frozen"])
    if kind == "inverse":
        h = entry["n_heads"]
        return InverseLayer(
            downs=[arrays[f"down_{i}"] for i in range(h)],
            w_up=arrays["w_up"],
            gate_weight=arrays["gate_weight"], gate_bias=arrays["gate_bias"],
            bias=arrays.get("bias"))
    if kind == "symmetric":
        return SymmetricLayer(
            downs=[arrays["down_0"], arrays["down_1"]],
            ups=[arrays["up_0"], arrays["up_1"]],
            gate_weight=arrays["gate_weight"], gate_bias=arrays["gate_bias"],
            bias=arrays.get("bias"))
    raise FormatError(f"unknown layer kind {kind!r} in manifest")


def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    """Write the network to ``path`` atomically (temp file then rename)."""
    manifest = {"layers": [_layer_manifest(l) for l in net.layers],
                "extra": extra or {}}
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(v, dtype="<f8").tobytes()
        for layer in net.layers for v in layer.params.values())
    data = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(payload))
    atomic_write(path, data + payload + blob)


def load_checkpoint(path) -> tuple[Network, dict]:
    """Read a network back; returns ``(network, extra_manifest)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    mlen = struct.unpack("<Q", raw[12:20])[0]
    if len(raw) < 20 + mlen:
        raise CorruptionError(f"{path}: manifest truncated "
                              f"(declared {mlen} bytes, {len(raw) - 20} present)")
    try:
        manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: manifest is not valid JSON: {exc}") from exc
    blob = raw[20 + mlen:]
    offset = 0
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        arrays = {}
        for spec in entry["arrays"]:
            count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
            need = count * 8
            if offset + need > len(blob):
                raise CorruptionError(
                    f"{path}: layer {i} ({entry['kind']}) array {spec['name']!r} "
                    f"needs {need} bytes at offset {offset}, only "
                    f"{len(blob) - offset} remain")
            arr = np.frombuffer(blob[offset:offset + need], dtype="<f8").astype(
                np.float64).reshape(spec["shape"])
            arrays[spec["name"]] = arr.copy()
            offset += need
        layers.append(_build_layer(entry, arrays))
    if offset != len(blob):
        raise CorruptionError(f"{path}: blob has {len(blob) - offset} trailing bytes "
                              f"beyond the declared {offset}")
    return Network(layers), manifest.get("extra", {})


def atomic_write(path, data: bytes) -> None:
    """Write bytes to ``path`` via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- delimited text -----------------------------------------------------------

def load_csv(path, schema: str = "regression") -> Dataset:
    """Parse a headered CSV of float64 rows.

    With ``schema="classification"`` the last column holds integer class
    labels; otherwise every column is a feature and ``y`` is empty. Ragged
    rows and non-numeric cells raise :class:`ParseError` with the
    1-based line number.
    """
    if schema not in ("regression", "classification"):
        raise RangeError(f"unknown csv schema {schema!r}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: line 1: missing header row") from None
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(f"{path}: line {lineno}: expected {width} fields, "
                                 f"got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    if schema == "classification":
        return Dataset(x=data[:, :-1], y=data[:, -1].astype(np.int64),
                       kind="classification")
    return Dataset(x=data, y=np.empty((len(rows), 0)), kind="regression")


def save_dataset_csv(ds: Dataset, path) -> None:
    """Write a dataset as CSV with round-trip-exact float formatting."""
    width = ds.x.shape[1]
    header = [f"x{i}" for i in range(width)]
    label_col = ds.kind == "classification" or (ds.y.ndim == 2 and ds.y.shape[1] > 0)
    rows = []
    if ds.kind == "classification":
        header.append("label")
        for xi, yi in zip(ds.x, ds.y):
            rows.append([repr(float(v)) for v in xi] + [repr(float(yi))])
    elif label_col:
        header += [f"y{i}" for i in range(ds.y.shape[1])]
        for xi, yi in zip(ds.x, ds.y):
            rows.append([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])
    else:
        for xi in ds.x:
            rows.append([repr(float(v)) for v in xi])
    out = [",".join(header)] + [",".join(r) for r in rows]
    atomic_write(path, ("\n".join(out) + "\n").encode("utf-8"))
