"""Multi-hot intent encoding: one block for the action, one per argument group."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

Intent = tuple[str, tuple[str, ...]]


class IntentError(ValueError):
    pass


@dataclass(frozen=True)
class ArgumentGroup:
    name: str
    values: tuple[str, ...]


@dataclass(frozen=True)
class IntentSchema:
    actions: tuple[str, ...]
    arguments: tuple[ArgumentGroup, ...] = ()

    def __post_init__(self):
        if len(self.actions) < 1:
            raise IntentError("schema needs at least one action")
        for g in self.arguments:
            if len(g.values) < 1:
                raise IntentError(f"argument group {g.name!r} has no values")
            if len(set(g.values)) != len(g.values):
                raise IntentError(f"duplicate values in group {g.name!r}")
        if len(set(self.actions)) != len(self.actions):
            raise IntentError("duplicate action names")

    @property
    def block_sizes(self) -> list[int]:
        return [len(self.actions)] + [len(g.values) for g in self.arguments]

    @property
    def offsets(self) -> list[int]:
        return [0] + list(np.cumsum(self.block_sizes)[:-1].tolist())

    @property
    def total_bits(self) -> int:
        return sum(self.block_sizes)

    @property
    def n_classes(self) -> int:
        return int(np.prod(self.block_sizes))

    def combinations(self) -> Iterator[Intent]:
        for action in self.actions:
            for values in itertools.product(*(g.values for g in self.arguments)):
                yield action, tuple(values)

    def to_json(self) -> dict:
        return {"actions": list(self.actions),
                "arguments": [{"name": g.name, "values": list(g.values)} for g in self.arguments]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "IntentSchema":
        extra = set(obj) - {"actions", "arguments"}
        if extra:
            raise IntentError(f"unknown schema keys {sorted(extra)}")
        groups = tuple(ArgumentGroup(a["name"], tuple(a["values"])) for a in obj.get("arguments", []))
        return cls(tuple(obj["actions"]), groups)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "IntentSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _resolve(options: Sequence[str], value, what: str) -> int:
    if isinstance(value, (int, np.integer)):
        if not 0 <= value < len(options):
            raise IntentError(f"{what} index {value} out of range")
        return int(value)
    try:
        return options.index(value)
    except ValueError:
        raise IntentError(f"unknown {what} {value!r}") from None


def encode_intent(schema: IntentSchema, action, arg_values=()) -> np.ndarray:
    """Bits with exactly one set per block. ``arg_values`` is a sequence in group order or a name->value map."""
    if isinstance(arg_values, Mapping):
        unknown = set(arg_values) - {g.name for g in schema.arguments}
        if unknown:
            raise IntentError(f"unknown argument groups {sorted(unknown)}")
        missing = [g.name for g in schema.arguments if g.name not in arg_values]
        if missing:
            raise IntentError(f"missing argument groups {missing}")
        arg_values = [arg_values[g.name] for g in schema.arguments]
    arg_values = list(arg_values)
    if len(arg_values) != len(schema.arguments):
        raise IntentError(f"expected {len(schema.arguments)} argument values, got {len(arg_values)}")
    bits = np.zeros(schema.total_bits, dtype=np.uint8)
    offsets = schema.offsets
    bits[offsets[0] + _resolve(schema.actions, action, "action")] = 1
    for k, (g, v) in enumerate(zip(schema.arguments, arg_values)):
        bits[offsets[k + 1] + _resolve(g.values, v, f"value for {g.name!r}")] = 1
    return bits


def decode_intent(schema: IntentSchema, logits) -> Intent:
    """Independent argmax per block; ties resolve to the lowest index."""
    logits = np.asarray(logits)
    if logits.shape != (schema.total_bits,):
        raise IntentError(f"expected {schema.total_bits} logits, got shape {logits.shape}")
    picks = [int(np.argmax(logits[o:o + n])) for o, n in zip(schema.offsets, schema.block_sizes)]
    return schema.actions[picks[0]], tuple(g.values[p] for g, p in zip(schema.arguments, picks[1:]))


def decode_batch(schema: IntentSchema, logits) -> list[Intent]:
    return [decode_intent(schema, row) for row in np.asarray(logits)]
