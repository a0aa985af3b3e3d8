"""Binary weight blob: ``NMT1`` magic, tensor count, per-tensor rank and
extents (all little-endian uint32), then the float32 payloads in order."""
import struct

import numpy as np

MAGIC = b"NMT1"


class BlobFormatError(ValueError):
    pass


def pack_tensors(tensors):
    header = [MAGIC, struct.pack("<I", len(tensors))]
    payload = []
    for t in tensors:
        arr = np.asarray(t)
        if arr.dtype != np.float32:
            raise BlobFormatError(f"blob tensors must be float32, got {arr.dtype}")
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    return b"".join(header + payload)


def unpack_tensors(data):
    if len(data) < 8 or data[:4] != MAGIC:
        raise BlobFormatError("bad weight blob magic (expected NMT1)")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    shapes = []
    try:
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shapes.append(struct.unpack_from(f"<{rank}I", data, pos))
            pos += 4 * rank
    except struct.error as exc:
        raise BlobFormatError("truncated weight blob header") from exc
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * n
        if end > len(data):
            raise BlobFormatError("truncated weight blob payload")
        tensors.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos)
                       .astype(np.float32).reshape(shape))
        pos = end
    if pos != len(data):
        raise BlobFormatError(f"{len(data) - pos} trailing bytes in weight blob")
    return tensors
