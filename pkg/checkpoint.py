"""
DCVW checkpoint container.

    b"DCVW" | u16 version | u32 manifest length | manifest (UTF-8 JSON) | DCT1 blobs

The manifest holds the network config and, per parameter, its shape plus the
offset/length of its DCT1 blob relative to the end of the manifest.
"""
import json
import struct
from dataclasses import asdict
from fractions import Fraction

import torch

from errors import FormatError
from tensor import decode_dct1, encode_dct1

DCVW_MAGIC = b"DCVW"
DCVW_VERSION = 1
_HEADER = struct.Struct("<4sHI")


def config_to_dict(cfg):
    data = asdict(cfg)
    data["ndc"]["source_ratio"] = str(Fraction(cfg.ndc.source_ratio).limit_denominator(1000))
    data["ndc"]["kernel"] = list(cfg.ndc.kernel)
    if cfg.patch is not None:
        data["patch"] = list(cfg.patch)
    return data


def config_from_dict(data):
    from deconver_net import DeconverConfig, NdcLayerConfig
    data = dict(data)
    ndc = dict(data.pop("ndc"))
    ndc["source_ratio"] = Fraction(ndc["source_ratio"])
    return DeconverConfig(ndc=NdcLayerConfig(**ndc), **data)


def encode_checkpoint(state, cfg, meta=None):
    entries, blobs, offset = {}, [], 0
    for name in sorted(state):
        blob = encode_dct1(state[name])
        entries[name] = {"shape": list(state[name].shape), "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    manifest = {"config": config_to_dict(cfg), "entries": entries, "meta": meta or {}}
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _HEADER.pack(DCVW_MAGIC, DCVW_VERSION, len(raw)) + raw + b"".join(blobs)


def decode_checkpoint(blob):
    """Returns (state dict, DeconverConfig, meta)."""
    if len(blob) < _HEADER.size:
        raise FormatError("truncated DCVW header")
    magic, version, length = _HEADER.unpack_from(blob)
    if magic != DCVW_MAGIC:
        raise FormatError("not a DCVW checkpoint (bad magic)")
    if version != DCVW_VERSION:
        raise FormatError(f"unsupported DCVW version {version}")
    start = _HEADER.size + length
    if len(blob) < start:
        raise FormatError("truncated DCVW manifest")
    try:
        manifest = json.loads(blob[_HEADER.size:start].decode("utf-8"))
        entries = manifest["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"malformed DCVW manifest: {e}") from e

    state, end = {}, start
    for name, entry in entries.items():
        lo = start + entry["offset"]
        hi = lo + entry["length"]
        if hi > len(blob):
            raise FormatError(f"DCVW entry {name!r} runs past end of file")
        tensor = decode_dct1(blob[lo:hi])
        if list(tensor.shape) != entry["shape"]:
            raise FormatError(f"DCVW entry {name!r} has shape {list(tensor.shape)}, manifest says {entry['shape']}")
        state[name] = tensor
        end = max(end, hi)
    if end != len(blob):
        raise FormatError(f"{len(blob) - end} trailing bytes after DCVW payload")
    return state, config_from_dict(manifest["config"]), manifest.get("meta", {})


def save_checkpoint(path, network, meta=None, state=None):
    """Write network's parameters, or a snapshot `state` of them taken earlier."""
    if state is None:
        state = {n: p.detach() for n, p in network.named_parameters()}
    with open(path, "wb") as f:
        f.write(encode_checkpoint(state, network.cfg, meta))


def load_checkpoint(path, dtype=None):
    """Rebuild the network stored at path; parameters keep their stored precision unless dtype is given."""
    from deconver_net import Deconver
    with open(path, "rb") as f:
        state, cfg, meta = decode_checkpoint(f.read())
    network = Deconver(cfg)
    stored = next(iter(state.values())).dtype if state else torch.get_default_dtype()
    network = network.to(dtype or stored)
    expected = {n for n, _ in network.named_parameters()}
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise FormatError(f"DCVW parameters do not match the config (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, p in network.named_parameters():
            p.copy_(state[name].to(p.dtype))
    return network, meta
