"""Array container files: a UTF-8 JSON manifest followed by raw float64 data.

Layout::

    8 bytes   magic (identifies the file kind)
    8 bytes   little-endian uint64, manifest length in bytes
    manifest  UTF-8 JSON: {"entries": [{"name", "shape", "offset"}, ...], "meta": {...}}
    payload   concatenated little-endian float64 arrays; offsets are relative
              to the start of the payload

The manifest is written with sorted keys and no whitespace variation so the
same inputs always produce byte-identical files.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"ICICLCK1"
TASKCACHE_MAGIC = b"ICICLTC1"


def write_arrays(path, arrays, meta=None, magic=CHECKPOINT_MAGIC):
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.nbytes
    manifest = json.dumps({"entries": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def read_arrays(path, magic=CHECKPOINT_MAGIC):
    """Return ``(OrderedDict name -> array, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest") from exc
    payload = memoryview(blob)[16 + n:]
    arrays = OrderedDict()
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(payload):
            raise FormatError(f"{path}: payload truncated at {e['name']}")
        arr = np.frombuffer(payload[start:stop], dtype="<f8").astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"])
    return arrays, manifest.get("meta", {})


def save_checkpoint(path, model, optimizer=None, meta=None):
    """Write model parameters (and AdamW moments, if given) to ``path``."""
    arrays = OrderedDict((f"param/{k}", v) for k, v in model.state_dict().items())
    meta = dict(meta or {})
    if optimizer is not None:
        st = optimizer.state
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"adam_m/{i}"] = m
            arrays[f"adam_v/{i}"] = v
        meta["optimizer"] = {"t": st.t, "lr": st.lr, "weight_decay": st.weight_decay,
                             "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                             "clip": optimizer.clip}
    write_arrays(path, arrays, meta)


def load_checkpoint(path, model, optimizer=None):
    """Restore parameters (and optimizer moments) in place; returns the meta dict."""
    arrays, meta = read_arrays(path)
    params = OrderedDict((k[len("param/"):], v) for k, v in arrays.items() if k.startswith("param/"))
    model.load_state_dict(params)
    if optimizer is not None:
        if "optimizer" not in meta:
            raise FormatError(f"{path}: checkpoint has no optimizer state")
        o = meta["optimizer"]
        st = optimizer.state
        st.t = int(o["t"])
        st.lr, st.weight_decay = o["lr"], o["weight_decay"]
        st.beta1, st.beta2, st.eps = o["beta1"], o["beta2"], o["eps"]
        optimizer.clip = o["clip"]
        st.m = [arrays[f"adam_m/{i}"].copy() for i in range(len(st.m))]
        st.v = [arrays[f"adam_v/{i}"].copy() for i in range(len(st.v))]
    return meta
