"""Binary checkpoint format.

Layout: 5 magic bytes ``LSFT1``, a little-endian uint64 header length, a
UTF-8 JSON header, then the raw payload. The header carries the full model
config, the step counter, the optimizer description, and a manifest of
(name, kind, dtype, shape, offset, nbytes) entries covering parameters,
named buffers (BN running stats), and optimizer slot arrays. Payload scalars
are little-endian float32, so save -> load -> forward is bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

MAGIC = b"LSFT1"

_F4 = np.dtype("<f4")


def _flat_entries(model, optimizer=None):
    """(name, kind, array) triples in manifest order."""
    entries = [(name, "param", p.data) for name, p in model.named_parameters()]
    entries += [(name, "buffer", b) for name, b in model.named_buffers()]
    if optimizer is not None:
        for slot, arrays in optimizer.slot_arrays().items():
            entries += [(f"opt.{slot}.{name}", "opt", a) for name, a in arrays.items()]
    return entries


def save_checkpoint(path, model, optimizer=None, step: int = 0) -> None:
    from .model import ConditionedUNet  # local import to avoid a cycle

    assert isinstance(model, ConditionedUNet)
    manifest = []
    chunks = []
    offset = 0
    for name, kind, arr in _flat_entries(model, optimizer):
        raw = np.ascontiguousarray(arr, dtype=_F4).tobytes()
        manifest.append({"name": name, "kind": kind, "dtype": "float32",
                         "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": model.cfg.to_dict(),
        "step": int(step),
        "optimizer": optimizer.describe() if optimizer is not None else None,
        "manifest": manifest,
        "payload_nbytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        fh.write(b"".join(chunks))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointError("truncated header length field")
        (hlen,) = np.frombuffer(raw_len, dtype="<u8")
        blob = fh.read(int(hlen))
        if len(blob) != int(hlen):
            raise CheckpointError("truncated header")
        try:
            return json.loads(blob.decode("utf-8"))
        except ValueError as exc:
            raise CheckpointError(f"header is not valid JSON: {exc}") from exc


def _validate_manifest(manifest, payload_nbytes: int):
    seen_end = 0
    for entry in manifest:
        name = entry.get("name", "<unnamed>")
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        expect = size * 4
        if entry["dtype"] != "float32":
            raise CheckpointError(f"manifest entry '{name}': unsupported dtype "
                                  f"{entry['dtype']}")
        if entry["nbytes"] != expect:
            raise CheckpointError(f"manifest entry '{name}': nbytes {entry['nbytes']} "
                                  f"does not match shape {entry['shape']}")
        if entry["offset"] < seen_end:
            raise CheckpointError(f"manifest entry '{name}': offset {entry['offset']} "
                                  f"overlaps the previous entry")
        seen_end = entry["offset"] + entry["nbytes"]
        if seen_end > payload_nbytes:
            raise CheckpointError(f"manifest entry '{name}': extends past payload "
                                  f"({seen_end} > {payload_nbytes})")


def load_checkpoint(path, expected_config=None):
    """Rebuild (model, optimizer, step) from a checkpoint file.

    ``expected_config``, when given, must match the embedded config exactly;
    a lightsaft checkpoint is rejected when loaded as lightsaft_plus.
    """
    from .model import ModelConfig, build
    from .train import make_optimizer

    header = read_header(path)
    for key in ("model_config", "manifest", "payload_nbytes", "step"):
        if key not in header:
            raise CheckpointError(f"header missing '{key}'")
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(
            f"checkpoint config (variant {cfg.variant!r}) does not match the "
            f"expected config (variant {expected_config.variant!r})")

    with open(path, "rb") as fh:
        fh.seek(len(MAGIC))
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        fh.seek(len(MAGIC) + 8 + int(hlen))
        payload = fh.read()
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(f"payload has {len(payload)} bytes, header declares "
                              f"{header['payload_nbytes']}")
    _validate_manifest(header["manifest"], len(payload))

    model = build(cfg)
    opt_desc = header.get("optimizer")
    optimizer = None
    if opt_desc is not None:
        optimizer = make_optimizer(model, **opt_desc)

    targets = {name: (kind, arr) for name, kind, arr in _flat_entries(model, optimizer)}
    loaded = set()
    for entry in header["manifest"]:
        name = entry["name"]
        if name not in targets:
            raise CheckpointError(f"manifest entry '{name}' does not exist in a "
                                  f"freshly built model")
        _kind, arr = targets[name]
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"manifest entry '{name}': shape {entry['shape']} "
                                  f"does not match model shape {list(arr.shape)}")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr[...] = np.frombuffer(raw, dtype=_F4).reshape(arr.shape)
        loaded.add(name)
    missing = sorted(set(targets) - loaded)
    if missing:
        raise CheckpointError(f"manifest entry '{missing[0]}' missing from checkpoint")
    return model, optimizer, int(header["step"])
