"""Run configuration: strict JSON parsing, seed fan-out, and config digests.

A run file is one JSON object with optional sections (suite, model, train,
train_overrides, fusion, analysis) plus master_seed. Unknown keys are
rejected everywhere. Every run resolves to a fully defaulted dictionary
whose canonical digest is stamped into each emitted artifact; later
stages refuse inputs carrying a different digest.

One master seed fans out to per-stage sub-seeds through a labeled hash:
seed(label...) = first 8 bytes, little-endian, of
sha256("<master>|<label>|<label>|...").
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .fusion import DEFAULT_LAMBDA_GRID, DEFAULT_TIES_GRID, FusionConfig
from .models import ModeTag, ModelSpec
from .training import TrainConfig

SEED_SCHEME = "sha256(master|label...)[:8] little-endian"

SUITE_DEFAULTS = {
    "n_tasks": 4,
    "input_dim": 16,
    "num_classes": 3,
    "samples_per_split": 512,
    "task_overlap": 0.3,
}
MODEL_DEFAULTS = {
    "hidden_dims": [32, 32],
    "lora_rank": 2,
    "lora_alpha": 2.0,
}
TRAIN_DEFAULTS = {
    "steps": 300,
    "batch_size": 32,
    "learning_rate": 0.005,
    "optimizer": "adam",
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
}
FUSION_DEFAULTS = {
    "lambda_grid": list(DEFAULT_LAMBDA_GRID),
    "ties_k_grid": list(DEFAULT_TIES_GRID),
    "ties_lambda_grid": list(DEFAULT_TIES_GRID),
    "lorahub_alpha": 0.05,
    "lorahub_max_steps": 40,
    "fewshot_per_task": 32,
}
ANALYSIS_DEFAULTS = {
    "lambda_min": -1.0,
    "lambda_max": 2.0,
    "resolution": 21,
    "ntk_eta": 1e-3,
    "ntk_max_samples": 64,
}

MODE_NAMES = [m.value for m in ModeTag]


def derive_seed(master: int, *labels) -> int:
    data = ("%d|" % int(master) + "|".join(str(l) for l in labels)).encode()
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def _merge_strict(section: str, given: dict, defaults: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    """Fill every default in; returns the resolved configuration dict."""
    if not isinstance(raw, dict):
        raise ConfigError("run configuration must be a JSON object")
    top_known = {"master_seed", "suite", "model", "train", "train_overrides",
                 "fusion", "analysis", "out_dir"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    master = int(raw.get("master_seed", 42))
    if seed_override is not None:
        master = int(seed_override)
    overrides = raw.get("train_overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("train_overrides must map mode names to train sections")
    bad_modes = set(overrides) - set(MODE_NAMES)
    if bad_modes:
        raise ConfigError(f"train_overrides for unknown modes: {sorted(bad_modes)}")
    resolved = {
        "master_seed": master,
        "seed_scheme": SEED_SCHEME,
        "suite": _merge_strict("suite", raw.get("suite", {}), SUITE_DEFAULTS),
        "model": _merge_strict("model", raw.get("model", {}), MODEL_DEFAULTS),
        "train": _merge_strict("train", raw.get("train", {}), TRAIN_DEFAULTS),
        "train_overrides": {
            mode: _merge_strict(f"train_overrides.{mode}", section, TRAIN_DEFAULTS)
            for mode, section in sorted(overrides.items())
        },
        "fusion": _merge_strict("fusion", raw.get("fusion", {}), FUSION_DEFAULTS),
        "analysis": _merge_strict("analysis", raw.get("analysis", {}), ANALYSIS_DEFAULTS),
    }
    # derived seeds documented for reproducibility audits
    resolved["derived_seeds"] = {
        "suite": derive_seed(master, "suite"),
        "model_init": derive_seed(master, "model_init"),
    }
    return resolved


def load_config(path: str | Path | None, seed_override: int | None = None) -> dict:
    if path is None:
        return resolve_config({}, seed_override)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return resolve_config(raw, seed_override)


def config_digest(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canonical.encode()).hexdigest()


def model_spec(resolved: dict, mode: ModeTag | str) -> ModelSpec:
    m = resolved["model"]
    s = resolved["suite"]
    return ModelSpec(
        input_dim=int(s["input_dim"]),
        hidden_dims=tuple(m["hidden_dims"]),
        num_classes=int(s["num_classes"]),
        lora_rank=int(m["lora_rank"]),
        lora_alpha=float(m["lora_alpha"]),
        mode=ModeTag(mode),
    )


def train_config(resolved: dict, mode: ModeTag | str, task_id: str) -> TrainConfig:
    mode = ModeTag(mode)
    section = resolved["train_overrides"].get(mode.value, resolved["train"])
    return TrainConfig(
        steps=int(section["steps"]),
        batch_size=int(section["batch_size"]),
        learning_rate=float(section["learning_rate"]),
        optimizer=str(section["optimizer"]),
        beta1=float(section["beta1"]),
        beta2=float(section["beta2"]),
        eps=float(section["eps"]),
        shuffle_seed=derive_seed(resolved["master_seed"], "shuffle", mode.value, task_id),
    )


def fusion_config(resolved: dict, algorithm: str) -> FusionConfig:
    f = resolved["fusion"]
    return FusionConfig(
        algorithm=algorithm,
        lambda_grid=tuple(f["lambda_grid"]),
        ties_k_grid=tuple(f["ties_k_grid"]),
        ties_lambda_grid=tuple(f["ties_lambda_grid"]),
        lorahub_alpha=float(f["lorahub_alpha"]),
        lorahub_max_steps=int(f["lorahub_max_steps"]),
        lorahub_fewshot_per_task=int(f["fewshot_per_task"]),
    )
