"""
Sub-fluxos aleatórios baseados em contador.

Cada sorteio do sistema vem de um gerador Philox cuja chave deriva da semente e cujo
contador inicial codifica (rótulo, índices). Assim o fluxo de (semente, t, n) é o mesmo
qualquer que seja a ordem ou a thread em que for criado.
"""
from __future__ import annotations

import hashlib
from enum import IntEnum
from functools import lru_cache

import numpy as np

_MAX_INDEX = 1 << 40


class StreamTag(IntEnum):
    """Rótulos que separam os domínios de sorteio."""

    POPULATION = 1
    INITIAL_POINT = 2
    SCHEDULE = 3
    LOCAL_STEP = 4
    SAMPLE_POINT = 5
    MONTE_CARLO = 6


def derive_seed(master: int, label: str) -> int:
    """Deriva uma semente u64 rotulada: sha1("<master>:<label>")[:16] como inteiro."""
    digest = hashlib.sha1(f"{int(master)}:{label}".encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


@lru_cache(maxsize=4096)
def _philox_key(seed: int) -> tuple:
    state = np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def substream(seed: int, tag: StreamTag, first: int = 0, second: int = 0,
              third: int = 0) -> np.random.Generator:
    """Gerador dedicado a (seed, tag, first, second, third).

    A palavra baixa do contador fica livre para o consumo do próprio fluxo; as três
    palavras altas guardam os índices, então fluxos distintos nunca se sobrepõem.
    """
    for index in (first, second, third):
        if not 0 <= int(index) < _MAX_INDEX:
            raise ValueError(f"índice de sub-fluxo fora do intervalo: {index}")
    key = np.array(_philox_key(int(seed)), dtype=np.uint64)
    counter = np.array(
        [0, int(third), int(second), (int(tag) << 40) | int(first)], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
