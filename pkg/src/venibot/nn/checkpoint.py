"""Binary tensor container ("VBNN").

Layout, all little-endian::

    magic   4 bytes  b"VBNN"
    version u32
    count   u32
    count x {
        name_len u32, name utf-8 bytes,
        dtype    u8   (see DTYPE_CODES),
        rank     u32,
        dims     rank x u64,
        values   raw little-endian, C order
    }
"""

import struct

import numpy as np

from ..errors import DataError

MAGIC = b"VBNN"
VERSION = 1
DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def dumps(tensors):
    """Serialise an ordered mapping ``name -> ndarray`` to bytes."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_CODES:
            raise DataError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def loads(data):
    if data[:4] != MAGIC:
        raise DataError("not a VBNN checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dt = CODE_DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(data):
                raise DataError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize,
                                      offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from None
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def graph_state(graph):
    """Parameters and running buffers of ``graph`` in one flat mapping."""
    state = dict(graph.params)
    state.update({f"buffer:{k}": v for k, v in graph.buffers.items()})
    return state


def load_graph_state(graph, state):
    expected = graph.param_shapes()
    missing = [k for k in expected if k not in state]
    if missing:
        raise DataError(f"checkpoint is missing parameters: {missing[:5]}")
    for k, shape in expected.items():
        if tuple(state[k].shape) != tuple(shape):
            raise DataError(f"parameter {k} has shape {state[k].shape}, expected {shape}")
    graph.params = {k: np.array(state[k], dtype=graph.dtype) for k in expected}
    graph.buffers = {}
    for k, shape in graph.buffer_shapes().items():
        arr = state.get(f"buffer:{k}")
        graph.buffers[k] = (np.array(arr, dtype=graph.dtype) if arr is not None
                            else np.zeros(shape, dtype=graph.dtype))
    graph.zero_grad()
    return graph
