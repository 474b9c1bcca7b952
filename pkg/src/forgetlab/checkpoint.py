"""Binary checkpoints.

Layout: magic ``FGTB`` | format version (u16 LE) | header length (u32 LE) |
header (UTF-8 JSON: architecture, seed, layer specs with trainable flags, blob
manifest) | parameter blobs (little-endian float32, declaration order, batch
norm running statistics included) | CRC-32 (u32 LE) of everything between the
version field and the checksum.

Parameters are stored at 32-bit precision; save -> load -> save is a byte-level
fixpoint because float32 values survive the float64 round trip exactly.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .network import Network, build_network

MAGIC = b"FGTB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, corrupt or incompatible checkpoint files."""


def _manifest(net: Network) -> list[dict]:
    blobs = []
    for layer in net.layers:
        for key, val in layer.params.items():
            blobs.append({"layer": layer.name, "key": key, "shape": list(val.shape)})
        for key, val in layer.state.items():
            blobs.append({"layer": layer.name, "key": key, "shape": list(val.shape)})
    return blobs


def _header(net: Network) -> dict:
    return {
        "arch": net.arch,
        "seed": net.seed,
        "layers": [
            {"name": l.name, "kind": l.kind, "hyper": l.hyper(), "trainable": l.trainable}
            for l in net.layers
        ],
        "blobs": _manifest(net),
    }


def save_checkpoint(net: Network, path: str) -> None:
    header = json.dumps(_header(net), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(header)), header]
    for layer in net.layers:
        for val in layer.params.values():
            parts.append(val.astype("<f4").tobytes())
        for val in layer.state.values():
            parts.append(val.astype("<f4").tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path: str, into: Network | None = None) -> Network:
    """Rebuild (or fill ``into``) from a checkpoint, validating integrity."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 2 + 4 + 4:
        raise CheckpointError(f"{path}: truncated file ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    body, (stored_crc,) = raw[6:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")

    (header_len,) = struct.unpack_from("<I", body, 0)
    if len(body) < 4 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(body[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None

    net = into if into is not None else build_network(header["arch"], header["seed"])
    _check_architecture(net, header, path)

    offset = 4 + header_len
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(body):
            raise CheckpointError(f"{path}: truncated parameter blob {blob['layer']}/{blob['key']}")
        arr = np.frombuffer(body[offset:end], dtype="<f4").reshape(shape).astype(np.float64)
        layer = net[blob["layer"]]
        if blob["key"] in layer.params:
            layer.params[blob["key"]] = arr
        else:
            layer.state[blob["key"]][...] = arr
        offset = end
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after blobs")

    for spec in header["layers"]:
        net[spec["name"]].trainable = spec["trainable"]
    net.zero_grads()
    return net


def _check_architecture(net: Network, header: dict, path: str) -> None:
    ours = [{"name": l.name, "kind": l.kind, "hyper": l.hyper()} for l in net.layers]
    theirs = [{"name": s["name"], "kind": s["kind"], "hyper": s["hyper"]}
              for s in header["layers"]]
    if net.arch != header["arch"] or ours != theirs:
        raise CheckpointError(
            f"{path}: architecture mismatch (file is {header['arch']!r}, "
            f"network is {net.arch!r} or layer specs differ)")
