"""
Synthetic desk-scale data.

Generators for a templated mini-language pretraining corpus and for the four
downstream task shapes: retrieval pairs, bracket-depth sequence
classification, clone-pair detection and token-level type inference. Every
generator is a pure function of its seed.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from .exceptions import InvalidInputError
from .numerics import IGNORE_INDEX, Rng


logger = logging.getLogger(__name__)

MIN_TASK_SIZE = 10
CLONE_POSITIVE_FRACTION = 0.15

TYPE_NAMES = ["<unk>", "int", "str", "float", "bool", "list"]
UNK_TYPE = 0

_NAMES = ["count", "total", "value", "index", "item", "result", "data", "size", "key", "node",
          "left", "right", "name", "path", "line", "buf", "acc", "step", "limit", "offset"]
_FUNCS = ["compute", "update", "merge", "parse", "load", "build", "scan", "check", "apply", "reduce"]
_CLASSES = ["Parser", "Buffer", "Node", "Graph", "Cache", "Reader", "Stack", "Queue"]
_OPS = ["+", "-", "*"]
_WORDS = ["ok", "done", "error", "empty", "full", "skip"]
_KEYWORDS = {"if", "in", "is", "or", "as", "def", "for", "and", "not", "del", "try"}

_CORPUS_TEMPLATES = [
    "def {f}_{g}({a}, {b}):\n    {c} = {a} {op} {b}\n    return {c}\n",
    "def {f}_{g}({a}):\n    for i in range({n}):\n        {a} = {a} {op} i\n    return {a}\n",
    "class {C}:\n    def __init__(self, {a}):\n        self.{a} = {a}\n\n"
    "    def get_{a}(self):\n        return self.{a}\n",
    "def {f}_{g}({a}):\n    if {a} > {n}:\n        return \"{w}\"\n    else:\n        return \"{w2}\"\n",
    "def {f}_{g}({a}, {b}):\n    {c} = []\n    for {d} in {a}:\n        {c}.append({d} {op} {b})\n"
    "    return {c}\n",
    "def {f}_{g}({a}):\n    while {a} < {n}:\n        {a} = {a} + 1\n    return {a}\n",
]


@dataclass
class SyntheticDataset:
    """A generated task: its kind and JSON-serialisable records."""

    kind: str
    records: List[Dict[str, Any]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, eval_fraction: float) -> Tuple["SyntheticDataset", "SyntheticDataset"]:
        """Head for training, tail for evaluation (records are already shuffled)."""
        n_eval = max(1, int(round(len(self.records) * eval_fraction)))
        n_eval = min(n_eval, len(self.records) - 1)
        cut = len(self.records) - n_eval
        return (SyntheticDataset(self.kind, self.records[:cut]),
                SyntheticDataset(self.kind, self.records[cut:]))

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        logger.info(f"Wrote {len(self.records)} {self.kind} records to {path}")
        return path

    @classmethod
    def read_jsonl(cls, path: Union[str, Path], kind: str) -> "SyntheticDataset":
        records = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise InvalidInputError(f"{path}:{line_no} is not valid JSON: {e}") from e
        required = _REQUIRED_FIELDS[kind]
        for index, record in enumerate(records):
            if not required <= set(record):
                raise InvalidInputError(f"{path} record {index} lacks fields {sorted(required - set(record))}")
        return cls(kind, records)


def _pick(rng: Rng, options: Sequence[str]) -> str:
    return options[int(rng.integers(0, len(options)))]


def _identifier(rng: Rng, length: int = 2) -> str:
    while True:
        letters = rng.integers(0, 26, length)
        name = "".join(chr(ord("a") + int(c)) for c in letters)
        if name not in _KEYWORDS:
            return name


def _fill(template: str, rng: Rng, names: Sequence[str] = _NAMES) -> str:
    a, b, c, d = (names[int(i)] for i in rng.permutation(len(names))[:4])
    return template.format(
        f=_pick(rng, _FUNCS), g=_pick(rng, _NAMES), C=_pick(rng, _CLASSES),
        a=a, b=b, c=c, d=d, op=_pick(rng, _OPS), n=int(rng.integers(1, 100)),
        w=_pick(rng, _WORDS), w2=_pick(rng, _WORDS),
    )


def generate_corpus(size: int, seed: int) -> List[str]:
    """Templated mini-language functions and classes for MLM pretraining."""
    if size < 1:
        raise InvalidInputError(f"corpus size must be positive, got {size}")
    rng = Rng(seed)
    return [_fill(_CORPUS_TEMPLATES[int(rng.integers(0, len(_CORPUS_TEMPLATES)))], rng)
            for _ in range(size)]


# --- task generators -------------------------------------------------------

def _retrieval(size: int, rng: Rng) -> List[Dict[str, Any]]:
    records = []
    for _ in range(size):
        rare = "zq" + _identifier(rng, 3)
        template = _CORPUS_TEMPLATES[int(rng.integers(0, len(_CORPUS_TEMPLATES)))]
        code = _fill(template.replace("{f}_{g}", rare).replace("{C}", rare.capitalize()), rng)
        verb = _pick(rng, _FUNCS)
        records.append({"query": f"{verb} with {rare} and return the {_pick(rng, _NAMES)}", "code": code})
    return records


def _bracket_text(depth: int, rng: Rng) -> str:
    """Groups of nested parentheses whose deepest group has exactly ``depth`` levels."""
    n_groups = int(rng.integers(2, 5))
    deepest = int(rng.integers(0, n_groups))
    parts = []
    for group in range(n_groups):
        level = depth if group == deepest else int(rng.integers(1, depth + 1))
        filler = [_pick(rng, _NAMES) for _ in range(level)]
        opened = " ( ".join(filler)
        parts.append(f"{opened} ( {_pick(rng, _NAMES)} )" + " )" * (level - 1))
    return " ; ".join(parts)


def _seq_class(size: int, rng: Rng, n_labels: int) -> List[Dict[str, Any]]:
    labels = np.arange(size) % n_labels
    labels = labels[rng.permutation(size)]
    return [{"text": _bracket_text(int(label) + 1, rng), "label": int(label)} for label in labels]


def _rename(code: str, rng: Rng) -> str:
    renamed = code
    for name in _NAMES:
        if name in renamed:
            renamed = renamed.replace(name, f"{name[0]}{_identifier(rng, 3)}")
    return renamed


def _pair_class(size: int, rng: Rng) -> List[Dict[str, Any]]:
    n_pos = max(1, int(CLONE_POSITIVE_FRACTION * size))
    labels = np.zeros(size, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(size)]
    records = []
    for label in labels:
        first_template = int(rng.integers(0, len(_CORPUS_TEMPLATES)))
        first = _fill(_CORPUS_TEMPLATES[first_template], rng)
        if label:
            second = _rename(first, rng)
        else:
            other = (first_template + 1 + int(rng.integers(0, len(_CORPUS_TEMPLATES) - 1))) \
                % len(_CORPUS_TEMPLATES)
            second = _fill(_CORPUS_TEMPLATES[other], rng)
        records.append({"first": first, "second": second, "label": int(label)})
    return records


_LITERALS = {
    1: lambda rng: str(int(rng.integers(0, 1000))),
    2: lambda rng: f"'{_identifier(rng, 2)}'",
    3: lambda rng: f"{int(rng.integers(0, 100))}.{int(rng.integers(0, 10))}",
    4: lambda rng: _pick(rng, ["True", "False"]),
    5: lambda rng: f"[{int(rng.integers(0, 10))}]",
}


def _token_class(size: int, rng: Rng) -> List[Dict[str, Any]]:
    """Assignments whose left-hand type comes from a literal, an earlier variable or an unknown call.

    Copies refer back to a declaration several statements earlier, so their
    type can only be resolved from distant context.
    """
    records = []
    for _ in range(size):
        tokens: List[str] = []
        types: List[int] = []
        declared: List[Tuple[str, int]] = []
        for _ in range(int(rng.integers(6, 12))):
            name = _identifier(rng, 2)
            choice = float(rng.random(1)[0])
            if declared and choice < 0.35:
                source, type_id = declared[int(rng.integers(0, len(declared)))]
                rhs = source
            elif choice < 0.45:
                type_id = UNK_TYPE
                rhs = f"{_pick(rng, _FUNCS)}()"
            else:
                type_id = int(rng.integers(1, len(TYPE_NAMES)))
                rhs = _LITERALS[type_id](rng)
            tokens += [name, "=", rhs, ";"]
            types += [type_id, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX]
            declared.append((name, type_id))
        records.append({"tokens": tokens, "types": types})
    return records


_REQUIRED_FIELDS = {
    "retrieval": {"query", "code"},
    "seq_class": {"text", "label"},
    "pair_class": {"first", "second", "label"},
    "token_class": {"tokens", "types"},
}


def generate_synthetic_task(kind: str, size: int, seed: int, n_labels: int = 4) -> SyntheticDataset:
    """Build a deterministic dataset for one task kind.

    Args:
        kind: retrieval, seq_class, pair_class or token_class
        size: Number of records (at least 10)
        seed: Generator seed
        n_labels: Depth classes for seq_class

    Returns:
        SyntheticDataset whose records are ready for JSONL export
    """
    if size < MIN_TASK_SIZE:
        raise InvalidInputError(f"synthetic tasks need at least {MIN_TASK_SIZE} records, got {size}")
    if kind not in _REQUIRED_FIELDS:
        raise InvalidInputError(f"unknown task kind {kind!r}")
    rng = Rng(seed)
    if kind == "retrieval":
        records = _retrieval(size, rng)
    elif kind == "seq_class":
        records = _seq_class(size, rng, n_labels)
    elif kind == "pair_class":
        records = _pair_class(size, rng)
    else:
        records = _token_class(size, rng)
    logger.debug(f"Generated {len(records)} {kind} records with seed {seed}")
    return SyntheticDataset(kind, records)
