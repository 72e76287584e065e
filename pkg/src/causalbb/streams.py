"""Deterministic RNG stream derivation.

Every dataset and every inference run gets its own counter-based generator whose
seed is a 64-bit mix of structured keys (master seed, scenario, estimator, n,
replicate index).  Streams therefore do not depend on scheduling: any worker that
computes replicate r of a cell derives exactly the same generator.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1

# Domain tags keep data streams and inference streams disjoint even when the
# remaining key parts collide.
DATA_TAG = 0x8FB3_19E5_0D6C_A271
INFER_TAG = 0x243F_6A88_85A3_08D3
ORACLE_TAG = 0x13198A2E03707344


def splitmix64(x: int) -> int:
    """One splitmix64 scramble step (Steele et al. finalizer)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def mix64(*parts: int) -> int:
    """Fold integer key parts into a single 64-bit seed.

    Order matters; negative parts are mapped into the 64-bit ring first.
    """
    acc = 0
    for p in parts:
        acc = splitmix64((acc ^ (int(p) & _MASK64)) & _MASK64)
    return acc


def name_key(name: str) -> int:
    """Stable 64-bit key for a scenario or estimator name."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generator(seed: int) -> np.random.Generator:
    """Counter-based generator for a derived 64-bit seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed & _MASK64)))


def data_stream(seed: int, scenario: str, n: int) -> np.random.Generator:
    """Generator used to draw one dataset."""
    return generator(mix64(DATA_TAG, seed, name_key(scenario), n))


def replicate_seed(master_seed: int, replicate: int) -> int:
    """Per-replicate dataset seed handed to generate_dataset by the harness."""
    return mix64(master_seed, replicate)


def inference_stream(
    master_seed: int, scenario: str, estimator: str, n: int, replicate: int
) -> np.random.Generator:
    """Generator driving all stochastic inference for one (cell, replicate)."""
    return generator(
        mix64(INFER_TAG, master_seed, name_key(scenario), name_key(estimator), n, replicate)
    )
