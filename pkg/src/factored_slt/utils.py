"""Shared plumbing: seeding, canonical hashing, thread control."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

THREADS_ENV_VAR = "FLA_SLT_THREADS"


def seed_all(seed: int) -> None:
    """Seed the torch global generator used for module init and dropout."""
    torch.manual_seed(int(seed))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Stateless per-epoch generator so resumed runs see the same batch order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E9, int(epoch)]))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config object."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def configure_threads(value: int | None) -> None:
    """Cap torch worker threads. 0 selects strict single-threaded mode, the
    setting under which loss curves are bitwise reproducible."""
    if value is None:
        return
    if value <= 0:
        torch.set_num_threads(1)
    else:
        torch.set_num_threads(value)


def threads_from_env() -> int | None:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc


def count_parameters(module: torch.nn.Module, trainable_only: bool = False) -> int:
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )
