"""Checkpoint files: magic ``B3CP``, version, JSON header, named float64 blocks, CRC-32."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import binfmt
from .networks import PolicySet

MAGIC = b"B3CP"
FORMAT_VERSION = 1


def to_bytes(blocks: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    w = binfmt.Writer(MAGIC, FORMAT_VERSION)
    w.text(json.dumps(header or {}, sort_keys=True))
    w.u32(len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        w.text(name)
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u64(d)
        w.raw(arr.tobytes())
    return w.finish()


def from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    def parse(r: binfmt.Reader):
        try:
            header = json.loads(r.text())
        except json.JSONDecodeError as exc:
            raise binfmt.ChecksumError("checkpoint header is not valid JSON") from exc
        blocks = {}
        for _ in range(r.u32()):
            name = r.text()
            ndim = r.u32()
            if ndim > 8:
                raise binfmt.ChecksumError(f"implausible rank {ndim} for block {name!r}")
            shape = tuple(r.u64() for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            blocks[name] = r.array("<f8", count).reshape(shape).astype(np.float64)
        return blocks, header

    return binfmt.open_container(data, MAGIC, FORMAT_VERSION, parse)


def policy_blocks(policies: PolicySet) -> tuple[dict[str, np.ndarray], dict]:
    header = {
        "kind": "policy_set",
        "n_agents": policies.n_agents,
        "obs_dim": policies.obs_dim,
        "act_dim": policies.act_dim,
        "hidden": list(policies.hidden),
        "hidden_activation": policies.net.hidden_activation,
    }
    return dict(zip(policies.param_names(), policies.params)), header


def save_policies(policies: PolicySet, path, extra: dict | None = None) -> Path:
    blocks, header = policy_blocks(policies)
    header.update(extra or {})
    path = Path(path)
    path.write_bytes(to_bytes(blocks, header))
    return path


def load_policies(path) -> tuple[PolicySet, dict]:
    blocks, header = from_bytes(Path(path).read_bytes())
    if header.get("kind") != "policy_set":
        raise binfmt.FormatError(f"checkpoint holds {header.get('kind')!r}, not a policy set")
    p = PolicySet(header["n_agents"], header["obs_dim"], header["act_dim"], tuple(header["hidden"]),
                  hidden_activation=header.get("hidden_activation", "relu"))
    for name, arr in zip(p.param_names(), p.params):
        if name not in blocks or blocks[name].shape != arr.shape:
            raise binfmt.FormatError(f"block {name!r} missing or misshapen")
        arr[...] = blocks[name]
    return p, header
