"""Binary checkpoints: versioned, little-endian, self-describing.

Layout:  magic ``ANCP`` | version u8 | u32-length config echo (canonical
text) | u32-length RNG state json | u32 record count | records.  Each
record is  u16 name length | name utf-8 | u8 rank | u32 dims | u8 dtype
code | payload.  Values are stored as little-endian float32 regardless of
the compute dtype, which keeps float32 runs bit-exact on round-trip.
Writes are atomic (temp file + rename).
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError

MAGIC = b"ANCP"
VERSION = 1
_DTYPE_CODE = 0  # float32, the only stored dtype


def _records(net):
    for name, p in net.named_params():
        yield name, p.value
    for name, b in net.named_buffers():
        yield name, b


def save_checkpoint(path, net, config_text="", rng_state=None):
    records = list(_records(net))
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<B", VERSION)
    cfg_bytes = config_text.encode("utf-8")
    payload += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    rng_bytes = json.dumps(rng_state, sort_keys=True).encode("utf-8") \
        if rng_state is not None else b""
    payload += struct.pack("<I", len(rng_bytes)) + rng_bytes
    payload += struct.pack("<I", len(records))
    for name, value in records:
        name_b = name.encode("utf-8")
        payload += struct.pack("<H", len(name_b)) + name_b
        payload += struct.pack("<B", value.ndim)
        payload += struct.pack(f"<{value.ndim}I", *value.shape)
        payload += struct.pack("<B", _DTYPE_CODE)
        payload += np.ascontiguousarray(value, dtype="<f4").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.raw):
            raise ConfigError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Returns (config_text, rng_state, records) with records an ordered
    list of (name, float32 ndarray)."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (rng_len,) = r.unpack("<I")
    rng_state = json.loads(r.take(rng_len).decode("utf-8")) if rng_len else None
    (count,) = r.unpack("<I")
    records = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        (code,) = r.unpack("<B")
        if code != _DTYPE_CODE:
            raise ConfigError(f"{path}: unknown dtype code {code}")
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        records.append((name, data))
    return config_text, rng_state, records


def load_checkpoint(path, net):
    """Restore parameters and running state into an already-built net.

    The net must have exactly the record set of the checkpoint (same
    architecture config).  Returns (config_text, rng_state).
    """
    config_text, rng_state, records = read_checkpoint(path)
    targets = dict(_records(net))
    seen = set()
    for name, data in records:
        if name not in targets:
            raise ConfigError(f"{path}: unexpected record {name!r}")
        dst = targets[name]
        if tuple(dst.shape) != tuple(data.shape):
            raise ConfigError(
                f"{path}: record {name!r} has shape {data.shape}, "
                f"net expects {dst.shape}")
        dst[...] = data.astype(dst.dtype)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise ConfigError(f"{path}: missing records {sorted(missing)[:5]}")
    return config_text, rng_state


def load_network(path):
    """Rebuild the network from the checkpoint's config echo and fill it."""
    from .config import config_from_text, netspec_from_config
    from .networks import build_resnet

    config_text, _, _ = read_checkpoint(path)
    if not config_text:
        raise ConfigError(f"{path}: checkpoint carries no config echo")
    cfg = config_from_text(config_text)
    net = build_resnet(netspec_from_config(cfg), seed=cfg["train.seed"])
    load_checkpoint(path, net)
    return net, cfg
