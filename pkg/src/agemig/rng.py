"""Deterministic random stream derivation.

Forecast trajectories draw from counter-based streams keyed by
(trajectory, country, period) so that results are identical no matter how
work is split across processes.  Country keys hash the country code itself,
so adding or reordering countries never shifts another country's stream.
"""
from __future__ import annotations

import hashlib

import numpy as np


def country_key(code: str) -> int:
    """Stable 64-bit key for a country code (independent of process state)."""
    digest = hashlib.blake2b(code.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def philox_key(seed: int) -> np.ndarray:
    """Expand a root seed into the 128-bit key a Philox generator expects."""
    return np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)


def trajectory_stream(key: np.ndarray, trajectory: int, country: str, period: int) -> np.random.Generator:
    """Independent generator for one (trajectory, country, period) cell.

    The varying indices live in the high counter words; the low word is left
    for the generator's own advancement, so distinct cells can never collide.
    """
    counter = np.array(
        [0, np.uint64(trajectory), np.uint64(country_key(country)), np.uint64(period)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def chain_seed(seed: int, chain: int, label: int) -> np.random.SeedSequence:
    """Seed for one sampler chain's shared (hyperparameter) stream."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(chain, label))


def country_chain_seed(seed: int, chain: int, code: str) -> np.random.SeedSequence:
    """Seed for one country's proposal stream within one sampler chain.

    Derived from the country code, not its position, so permuting the
    country list permutes per-country results exactly.
    """
    return np.random.SeedSequence(entropy=seed, spawn_key=(chain, country_key(code)))
