"""Counter-based, splittable random streams.

A stream is just ``(algorithm, seed, path)``. Draws depend on nothing else, so
a row of a sweep gets the same numbers whatever thread evaluates it.
"""
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

ALGORITHM = "philox4x64-10"
_U64 = 2 ** 64


class RandomStream(BaseModel):
    algorithm: str = ALGORITHM
    seed: int = Field(ge=0, lt=_U64)
    path: Tuple[int, ...] = ()

    model_config = ConfigDict(frozen=True)

    @field_validator("algorithm")
    @classmethod
    def known_algorithm(cls, v: str) -> str:
        if v != ALGORITHM:
            raise ValueError(f"unsupported generator '{v}', expected '{ALGORITHM}'")
        return v

    @field_validator("path")
    @classmethod
    def non_negative_labels(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(label < 0 or label >= _U64 for label in v):
            raise ValueError("substream labels must be unsigned 64-bit integers")
        return v

    def derive(self, label: int) -> "RandomStream":
        return RandomStream(algorithm=self.algorithm, seed=self.seed, path=self.path + (int(label),))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def derive_stream(master: RandomStream, label: int) -> RandomStream:
    return master.derive(label)
