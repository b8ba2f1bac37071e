"""Model persistence: a text manifest beside a raw float32 blob.

Layout of a saved model directory:

    model.manifest   text, line-oriented key/value (grammar below)
    model.blob       concatenated little-endian float32 tensors, row-major

Manifest grammar (one record per line, whitespace separated):

    tkcompress-model <format_version>
    blob bytes <n> sha256 <hex digest of model.blob>
    meta input_shape <C> <H> <W>
    meta num_classes <K>
    layer <name> kind conv dims <D> <S> <T> stride <s> padding <p> offset <o> length <bytes>
    layer <name> kind factorized_conv dims <D> <S> <T> ranks <R3> <R4> stride <s> padding <p> offset <o> length <bytes>
    layer <name> kind fc dims <M> <N> offset <o> length <bytes>
    layer <name> kind factorized_fc dims <M> <N> ranks <R> offset <o> length <bytes>

Per-layer tensors are stored back to back in the order the layer runs
them: kernel (conv); u3, core, u4 (factorized_conv); weight (fc); a, b
(factorized_fc).  Offsets are ascending and non-overlapping and the blob
length must equal their sum; the checksum is verified on load.  Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import hashlib
import os
import tempfile

import numpy as np

from .decomp import ConvLayerSpec, FactorizedConv, FactorizedFc, FcLayerSpec
from .trainer import Model

__all__ = [
    "ModelFormatError",
    "ManifestError",
    "ChecksumMismatchError",
    "TruncatedBlobError",
    "UnknownLayerKindError",
    "VersionSkewError",
    "save_model",
    "load_model",
    "MANIFEST_NAME",
    "BLOB_NAME",
]

MANIFEST_NAME = "model.manifest"
BLOB_NAME = "model.blob"
_MAGIC = "tkcompress-model"
_VERSION = 1


class ModelFormatError(Exception):
    """Base class for persistence failures."""


class ManifestError(ModelFormatError):
    """Manifest text cannot be parsed."""


class ChecksumMismatchError(ModelFormatError):
    """Blob bytes do not hash to the manifest checksum."""


class TruncatedBlobError(ModelFormatError):
    """Blob is shorter than the manifest layout requires."""


class UnknownLayerKindError(ModelFormatError):
    """Manifest names a layer kind this version does not know."""


class VersionSkewError(ModelFormatError):
    """Manifest format version is not supported."""


def _layer_arrays(block) -> list[np.ndarray]:
    if isinstance(block, FactorizedConv):
        return [block.u3, block.core, block.u4]
    if isinstance(block, ConvLayerSpec):
        return [block.kernel]
    if isinstance(block, FactorizedFc):
        return [block.a, block.b]
    if isinstance(block, FcLayerSpec):
        return [block.weight]
    raise TypeError(f"cannot persist block of type {type(block).__name__}")


def _layer_record(name: str, block, offset: int) -> tuple[str, int]:
    arrays = _layer_arrays(block)
    length = sum(a.size for a in arrays) * 4
    if isinstance(block, FactorizedConv):
        d, s, t = block.dims
        r3, r4 = block.ranks
        rec = (
            f"layer {name} kind factorized_conv dims {d} {s} {t} ranks {r3} {r4} "
            f"stride {block.stride} padding {block.padding} offset {offset} length {length}"
        )
    elif isinstance(block, ConvLayerSpec):
        d, s, t = block.dims
        rec = (
            f"layer {name} kind conv dims {d} {s} {t} "
            f"stride {block.stride} padding {block.padding} offset {offset} length {length}"
        )
    elif isinstance(block, FactorizedFc):
        m, n = block.dims
        rec = f"layer {name} kind factorized_fc dims {m} {n} ranks {block.rank} offset {offset} length {length}"
    else:
        m, n = block.dims
        rec = f"layer {name} kind fc dims {m} {n} offset {offset} length {length}"
    return rec, length


def _atomic_write(path: str, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: Model, directory: str) -> None:
    """Write manifest + blob for ``model`` into ``directory`` (created if needed)."""
    os.makedirs(directory, exist_ok=True)
    chunks: list[bytes] = []
    records: list[str] = []
    offset = 0
    for name, block in zip(model.names, model.blocks):
        for arr in _layer_arrays(block):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        rec, length = _layer_record(name, block, offset)
        records.append(rec)
        offset += length
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    lines = [f"{_MAGIC} {_VERSION}", f"blob bytes {len(blob)} sha256 {digest}"]
    c, h, w = model.input_shape
    lines.append(f"meta input_shape {c} {h} {w}")
    lines.append(f"meta num_classes {model.num_classes}")
    lines.extend(records)
    _atomic_write(os.path.join(directory, BLOB_NAME), blob)
    _atomic_write(os.path.join(directory, MANIFEST_NAME), ("\n".join(lines) + "\n").encode())


def _ints(tokens: list[str], n: int, ctx: str) -> list[int]:
    if len(tokens) < n:
        raise ManifestError(f"truncated {ctx} record")
    try:
        return [int(t) for t in tokens[:n]]
    except ValueError as exc:
        raise ManifestError(f"non-integer field in {ctx} record") from exc


def _take(tokens: list[str], keyword: str, ctx: str) -> list[str]:
    if not tokens or tokens[0] != keyword:
        raise ManifestError(f"expected {keyword!r} in {ctx} record")
    return tokens[1:]


def _read_layer(tokens: list[str], blob: bytes):
    name = tokens[0]
    rest = _take(tokens[1:], "kind", name)
    kind = rest[0]
    rest = rest[1:]
    if kind not in ("conv", "factorized_conv", "fc", "factorized_fc"):
        raise UnknownLayerKindError(f"unknown layer kind {kind!r}")
    rest = _take(rest, "dims", name)

    def grab(blob_off, shape):
        count = int(np.prod(shape))
        end = blob_off + 4 * count
        if end > len(blob):
            raise TruncatedBlobError(f"blob ends inside layer {name!r}")
        arr = np.frombuffer(blob[blob_off:end], dtype="<f4").reshape(shape)
        return arr.astype(np.float32), end

    if kind in ("conv", "factorized_conv"):
        d, s, t = _ints(rest, 3, name)
        rest = rest[3:]
        r3 = r4 = None
        if kind == "factorized_conv":
            rest = _take(rest, "ranks", name)
            r3, r4 = _ints(rest, 2, name)
            rest = rest[2:]
        rest = _take(rest, "stride", name)
        (stride,) = _ints(rest, 1, name)
        rest = _take(rest[1:], "padding", name)
        (padding,) = _ints(rest, 1, name)
        rest = _take(rest[1:], "offset", name)
        (offset,) = _ints(rest, 1, name)
        rest = _take(rest[1:], "length", name)
        (length,) = _ints(rest, 1, name)
        if kind == "conv":
            kernel, end = grab(offset, (d, d, s, t))
            block = ConvLayerSpec(kernel, stride=stride, padding=padding)
        else:
            u3, pos = grab(offset, (s, r3))
            core, pos = grab(pos, (d, d, r3, r4))
            u4, end = grab(pos, (t, r4))
            block = FactorizedConv(u3, core, u4, stride=stride, padding=padding)
    else:
        m, n = _ints(rest, 2, name)
        rest = rest[2:]
        r = None
        if kind == "factorized_fc":
            rest = _take(rest, "ranks", name)
            (r,) = _ints(rest, 1, name)
            rest = rest[1:]
        rest = _take(rest, "offset", name)
        (offset,) = _ints(rest, 1, name)
        rest = _take(rest[1:], "length", name)
        (length,) = _ints(rest, 1, name)
        if kind == "fc":
            weight, end = grab(offset, (m, n))
            block = FcLayerSpec(weight)
        else:
            a, pos = grab(offset, (m, r))
            b, end = grab(pos, (r, n))
            block = FactorizedFc(a, b)
    if end - offset != length:
        raise ManifestError(f"layer {name!r} length {length} != computed {end - offset}")
    return name, block, offset, length


def load_model(directory: str) -> Model:
    """Read a saved model back; raises a specific ModelFormatError subclass on damage."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    blob_path = os.path.join(directory, BLOB_NAME)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ManifestError("empty manifest")
    head = lines[0].split()
    if len(head) != 2 or head[0] != _MAGIC:
        raise ManifestError("bad magic line")
    try:
        version = int(head[1])
    except ValueError as exc:
        raise ManifestError("bad version field") from exc
    if version != _VERSION:
        raise VersionSkewError(f"unsupported format version {version}")

    with open(blob_path, "rb") as fh:
        blob = fh.read()

    blob_bytes = None
    digest = None
    input_shape = None
    num_classes = None
    names: list[str] = []
    blocks: list = []
    expected_offset = 0
    for line in lines[1:]:
        tokens = line.split()
        if tokens[0] == "blob":
            rest = _take(tokens[1:], "bytes", "blob")
            (blob_bytes,) = _ints(rest, 1, "blob")
            rest = _take(rest[1:], "sha256", "blob")
            if not rest:
                raise ManifestError("missing checksum")
            digest = rest[0]
        elif tokens[0] == "meta":
            if tokens[1] == "input_shape":
                input_shape = tuple(_ints(tokens[2:], 3, "meta"))
            elif tokens[1] == "num_classes":
                (num_classes,) = _ints(tokens[2:], 1, "meta")
            else:
                raise ManifestError(f"unknown meta field {tokens[1]!r}")
        elif tokens[0] == "layer":
            name, block, offset, length = _read_layer(tokens[1:], blob)
            if offset != expected_offset:
                raise ManifestError(
                    f"layer {name!r} offset {offset} is not contiguous "
                    f"(expected {expected_offset})"
                )
            expected_offset = offset + length
            names.append(name)
            blocks.append(block)
        else:
            raise ManifestError(f"unknown record {tokens[0]!r}")

    if blob_bytes is None or digest is None:
        raise ManifestError("missing blob record")
    if len(blob) < blob_bytes or expected_offset != blob_bytes:
        raise TruncatedBlobError(
            f"blob is {len(blob)} bytes, manifest layout needs {max(blob_bytes, expected_offset)}"
        )
    if len(blob) != blob_bytes:
        raise ManifestError(f"blob is {len(blob)} bytes, manifest says {blob_bytes}")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise ChecksumMismatchError("blob checksum mismatch")
    if input_shape is None or num_classes is None:
        raise ManifestError("missing meta records")
    return Model(blocks, names, input_shape, num_classes)
