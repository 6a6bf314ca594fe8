"""Versioned checkpoint containers with content digests.

A checkpoint file is JSON holding the architecture spec, paradigm, init
seed, backbone digest, and the initial plus trained trainable trees as
base64-wrapped little-endian float64 payloads. The trailing digest covers
every other field, so any corruption is detectable; the backbone digest
pins the (spec, seed) pair the trainable trees belong to.
"""

from __future__ import annotations

import base64
import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .models import ModelSpec, build_model
from .params import ParamTree

FORMAT = "fuselab-checkpoint"
VERSION = 1


@functools.lru_cache(maxsize=128)
def backbone_for(spec: ModelSpec, seed: int) -> ParamTree:
    """Deterministic backbone rebuild, cached per (spec, seed)."""
    return build_model(spec, seed)[0]


@dataclass(frozen=True)
class Checkpoint:
    """A fine-tuning result: initial and trained trainable trees."""

    spec: ModelSpec
    task_id: str
    init_seed: int
    initial: ParamTree
    trained: ParamTree
    metrics: dict = field(default_factory=dict)

    @property
    def mode(self):
        return self.spec.mode

    def theta0(self) -> ParamTree:
        return backbone_for(self.spec, self.init_seed)


def _encode_tree(tree: ParamTree) -> dict:
    blob = b"".join(tree[p].array.astype("<f8").tobytes() for p in tree.paths())
    return {
        "paths": tree.paths(),
        "shapes": [list(tree[p].shape) for p in tree.paths()],
        "data": base64.b64encode(blob).decode("ascii"),
    }


def _decode_tree(d: dict) -> ParamTree:
    blob = base64.b64decode(d["data"])
    flat = np.frombuffer(blob, dtype="<f8")
    entries = {}
    offset = 0
    for path, shape in zip(d["paths"], d["shapes"]):
        size = int(np.prod(shape)) if shape else 1
        entries[path] = flat[offset : offset + size].reshape([int(s) for s in shape])
        offset += size
    if offset != flat.size:
        raise ContractError("checkpoint tree payload has trailing bytes")
    return ParamTree(entries)


def _payload_digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canonical.encode()).hexdigest()


def checkpoint_payload(ckpt: Checkpoint, config_digest: str = "") -> dict:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "config_digest": config_digest,
        "spec": ckpt.spec.to_dict(),
        "mode": ckpt.spec.mode.value,
        "task_id": ckpt.task_id,
        "seed": int(ckpt.init_seed),
        "theta0_digest": ckpt.theta0().digest(),
        "initial": _encode_tree(ckpt.initial),
        "trained": _encode_tree(ckpt.trained),
        "metrics": {k: float(v) for k, v in sorted(ckpt.metrics.items())},
    }
    payload["digest"] = _payload_digest(payload)
    return payload


def save_checkpoint(ckpt: Checkpoint, path, config_digest: str = "") -> None:
    payload = checkpoint_payload(ckpt, config_digest)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path, expected_config_digest: str | None = None) -> Checkpoint:
    """Load and verify a checkpoint file.

    Raises ContractError on corruption or format mismatch and ConfigError
    when the file was produced under a different resolved configuration.
    """
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FORMAT or payload.get("version") != VERSION:
        raise ContractError(f"{path} is not a version-{VERSION} checkpoint file")
    stored = payload.pop("digest", None)
    if stored != _payload_digest(payload):
        raise ContractError(f"checkpoint {path} is corrupted (digest mismatch)")
    if expected_config_digest is not None and payload["config_digest"] != expected_config_digest:
        raise ConfigError(
            f"checkpoint {path} was produced under a different configuration"
        )
    spec = ModelSpec.from_dict(payload["spec"])
    ckpt = Checkpoint(
        spec=spec,
        task_id=payload["task_id"],
        init_seed=int(payload["seed"]),
        initial=_decode_tree(payload["initial"]),
        trained=_decode_tree(payload["trained"]),
        metrics=dict(payload["metrics"]),
    )
    if ckpt.theta0().digest() != payload["theta0_digest"]:
        raise ContractError(f"checkpoint {path} backbone digest does not match its seed")
    return ckpt
