"""Bit-exact serialization of the compressed artifact and ratio accounting.

Byte layout (all little-endian)::

    magic "VXS1"
    u32   header length
    bytes header JSON (versioned record: block dims, N, codebook sizes,
          K, model spec, normalization metadata, parameter table, dtype)
    bytes codebook, packed reals (f32, or f16 under the half flag)
    bytes indices, ceil(log2 d) bits each, padded to a byte per block
    bytes decode-side parameters, packed reals in header table order
    u32   CRC-32 over everything between the magic and this trailer

The decode side needs only the network weights, codebook and indices, so
encoder-side extractor/fusion weights stay out of the container (and out
of the compression-ratio denominator); persist them separately with
``training.save_state`` if the run will be resumed or distilled.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import ArgumentError, ChecksumError, MalformedInputError, StateError
from .inr import ModelSpec, embed_coords, full_grid_coords, predict_graph
from .nn import ParamStore
from .autodiff import Tensor
from .volume import BlockSet, Volume

__all__ = [
    "MAGIC",
    "index_bits",
    "pack_indices",
    "unpack_indices",
    "serialize",
    "read_header",
    "decode",
    "compression_ratio",
    "dump_header",
]

MAGIC = b"VXS1"
_VERSION = 1


def index_bits(codebook_size: int) -> int:
    """Bits per stored index: ``ceil(log2 d)``, at least 1."""
    if codebook_size < 2:
        raise ArgumentError(f"codebook_size must be >= 2, got {codebook_size}")
    return max(1, int(codebook_size - 1).bit_length())


def pack_indices(indices: np.ndarray, codebook_size: int) -> bytes:
    """Pack an (N, K) index table at ``index_bits`` per entry.

    Bits fill each byte LSB-first; every block row pads to a byte boundary
    so blocks stay independently addressable.
    """
    indices = np.asarray(indices)
    if indices.min(initial=0) < 0 or indices.max(initial=0) >= codebook_size:
        raise ArgumentError(f"indices out of range [0, {codebook_size})")
    bits = index_bits(codebook_size)
    out = bytearray()
    for row in np.atleast_2d(indices):
        acc = 0
        nbits = 0
        for value in row:
            acc |= int(value) << nbits
            nbits += bits
            while nbits >= 8:
                out.append(acc & 0xFF)
                acc >>= 8
                nbits -= 8
        if nbits:
            out.append(acc & 0xFF)
    return bytes(out)


def unpack_indices(data: bytes, n_blocks: int, k: int, codebook_size: int) -> np.ndarray:
    bits = index_bits(codebook_size)
    row_bytes = (k * bits + 7) // 8
    if len(data) != n_blocks * row_bytes:
        raise MalformedInputError(f"index payload {len(data)} bytes, expected {n_blocks * row_bytes}")
    out = np.empty((n_blocks, k), dtype=np.int64)
    mask = (1 << bits) - 1
    for b in range(n_blocks):
        chunk = data[b * row_bytes:(b + 1) * row_bytes]
        acc = int.from_bytes(chunk, "little")
        for i in range(k):
            out[b, i] = acc & mask
            acc >>= bits
    return out


def _param_dtype(half: bool):
    return np.dtype("<f2") if half else np.dtype("<f4")


def serialize(state, blocks_meta: dict = None, half_precision: bool = False) -> bytes:
    """Write a trained state into the container byte format.

    ``state`` is a trained teacher or student (indices recorded);
    ``blocks_meta`` merges extra normalization/provenance fields into the
    header.  The deterministic layout makes round-trips bit-exact.
    """
    if state.per_block_indices is None:
        raise StateError("state has no per-block indices; train or record them first")
    indices = np.asarray(state.per_block_indices)
    n_blocks, k = indices.shape
    d, v = state.codebook.size, state.codebook.width
    dt = _param_dtype(half_precision)
    param_table = [{"name": name, "shape": list(arr.shape)} for name, arr in state.inr_params.items()]
    header = {
        "version": _VERSION,
        "kind": state.kind,
        "block_dims": list(state.block_dims),
        "n_blocks": n_blocks,
        "codebook_size": d,
        "prior_width": v,
        "bottleneck_tokens": k,
        "index_bits": index_bits(d),
        "param_dtype": "f2" if half_precision else "f4",
        "model_spec": {
            "coord_embed_bands": state.model_spec.coord_embed_bands,
            "hidden_width": state.model_spec.hidden_width,
            "mlp_depth": state.model_spec.mlp_depth,
            "transformer_blocks": state.model_spec.transformer_blocks,
            "sine_omega0": state.model_spec.sine_omega0,
            "role": state.model_spec.role,
        },
        "normalization": {"value_range": [0.0, 1.0]},
        "params": param_table,
    }
    if blocks_meta:
        header["normalization"].update(blocks_meta)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = bytearray()
    payload += struct.pack("<I", len(header_bytes))
    payload += header_bytes
    payload += np.ascontiguousarray(state.codebook.codewords.astype(dt)).tobytes()
    payload += pack_indices(indices, d)
    for name, arr in state.inr_params.items():
        payload += np.ascontiguousarray(arr.astype(dt)).tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    return MAGIC + bytes(payload) + struct.pack("<I", crc)


def _validated_payload(container: bytes) -> bytes:
    if len(container) < 12 or container[:4] != MAGIC:
        raise MalformedInputError("not a container: bad magic")
    payload, trailer = container[4:-4], container[-4:]
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    stored = struct.unpack("<I", trailer)[0]
    if crc != stored:
        raise ChecksumError(f"payload CRC {crc:#010x} != stored {stored:#010x}")
    return payload


def _parse(container: bytes):
    payload = _validated_payload(container)
    (hlen,) = struct.unpack_from("<I", payload, 0)
    header = json.loads(payload[4:4 + hlen].decode())
    off = 4 + hlen
    d, v = header["codebook_size"], header["prior_width"]
    dt = _param_dtype(header["param_dtype"] == "f2")
    cb_bytes = d * v * dt.itemsize
    codebook = np.frombuffer(payload[off:off + cb_bytes], dtype=dt).astype(np.float32).reshape(d, v)
    off += cb_bytes
    n, k = header["n_blocks"], header["bottleneck_tokens"]
    idx_bytes = n * ((k * header["index_bits"] + 7) // 8)
    indices = unpack_indices(payload[off:off + idx_bytes], n, k, d)
    off += idx_bytes
    params = ParamStore()
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = size * dt.itemsize
        arr = np.frombuffer(payload[off:off + nbytes], dtype=dt).astype(np.float32).reshape(entry["shape"])
        params.add(entry["name"], arr)
        off += nbytes
    if off != len(payload):
        raise MalformedInputError(f"{len(payload) - off} trailing bytes after parameters")
    return header, codebook, indices, params


def read_header(container: bytes) -> dict:
    """Validate the checksum and return the parsed header record."""
    payload = _validated_payload(container)
    (hlen,) = struct.unpack_from("<I", payload, 0)
    return json.loads(payload[4:4 + hlen].decode())


def dump_header(container: bytes) -> str:
    return json.dumps(read_header(container), indent=2, sort_keys=True)


def decode(container: bytes, block_index: int, chunk: int = 16384) -> Volume:
    """Evaluate the stored network at every voxel center of one block.

    Output intensities clamp to [0, 1]; decoding is deterministic, so two
    decodes of the same container are bit-identical.
    """
    header, codebook, indices, params = _parse(container)
    n = header["n_blocks"]
    if not 0 <= block_index < n:
        raise ArgumentError(f"block_index {block_index} outside [0, {n})")
    spec = ModelSpec(**header["model_spec"])
    dims = tuple(header["block_dims"])
    z_q = codebook[indices[block_index]][None]
    tensors = params.tensors(requires_grad=False)
    pts = full_grid_coords(dims)
    outs = []
    for lo in range(0, len(pts), chunk):
        emb = embed_coords(pts[lo:lo + chunk], spec.coord_embed_bands).astype(np.float32)[None]
        outs.append(predict_graph(emb, Tensor(z_q), tensors, spec).data[0])
    data = np.clip(np.concatenate(outs), 0.0, 1.0).reshape(dims).astype(np.float32)
    return Volume(data, value_range=(0.0, 1.0), source_id=f"decoded:block{block_index}")


def compression_ratio(container_size_bytes: int, blocks: BlockSet,
                      source_bytes_per_voxel: int) -> float:
    """Raw source bytes over container bytes.

    The numerator covers every block at the source element width; the
    denominator is the actual on-disk container size (model parameters,
    codebook, indices and header all included).
    """
    if container_size_bytes <= 0:
        raise ArgumentError(f"container size must be positive, got {container_size_bytes}")
    raw = len(blocks) * blocks.voxels_per_block * source_bytes_per_voxel
    return raw / container_size_bytes
