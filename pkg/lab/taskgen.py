"""
Symbolic in-context-learning task generators, tokenizer, noise and context extension
"""

import csv
import logging
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from lab.core.exceptions import (
    ConfigError,
    ContextOverflowError,
    DomainExhaustedError,
    NoiseSpecError,
    UnknownTokenError,
)
from lab.models.config import NoiseSpec
from lab.tables import MAPPING_TABLES, all_words

logger = logging.getLogger(__name__)

PAD = "<pad>"
ARROW = "→"
COMMA = ","
LBRACKET = "["
RBRACKET = "]"

LOWER = tuple(string.ascii_lowercase)
UPPER = tuple(string.ascii_uppercase)
DIGITS = tuple(string.digits)

LIST_MIN_LEN = 2
LIST_MAX_LEN = 5

# RNG streams, see lab.transformer.STREAM_INIT
STREAM_DATA = 1
STREAM_EVAL = 2
STREAM_NOISE = 3
STREAM_EXTEND = 4

Input = Tuple[str, ...]


class Tokenizer:
    """Bijection token string <-> id; id 0 is padding"""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos: List[str] = list(tokens)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        self._max_len = max(len(t) for t in self.itos)

    @classmethod
    def default(cls) -> "Tokenizer":
        return cls([PAD, ARROW, COMMA, LBRACKET, RBRACKET, *LOWER, *UPPER, *DIGITS, *all_words()])

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def sep_id(self) -> int:
        return self.stoi[ARROW]

    def encode_tokens(self, tokens: Iterable[str]) -> List[int]:
        out = []
        for t in tokens:
            if t not in self.stoi:
                raise UnknownTokenError(f"unknown token {t!r}")
            out.append(self.stoi[t])
        return out

    def decode(self, ids: Iterable[int]) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise UnknownTokenError(f"unknown token id {i}")
            out.append(self.itos[i])
        return out

    def encode_text(self, text: str) -> List[int]:
        """Greedy longest match inside each whitespace-separated chunk"""
        ids = []
        for chunk in text.split():
            pos = 0
            while pos < len(chunk):
                for n in range(min(self._max_len, len(chunk) - pos), 0, -1):
                    piece = chunk[pos:pos + n]
                    if piece in self.stoi:
                        ids.append(self.stoi[piece])
                        pos += n
                        break
                else:
                    raise UnknownTokenError(f"unknown token at {chunk[pos:]!r}")
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


_DEFAULT_TOKENIZER: Optional[Tokenizer] = None


def default_tokenizer() -> Tokenizer:
    global _DEFAULT_TOKENIZER
    if _DEFAULT_TOKENIZER is None:
        _DEFAULT_TOKENIZER = Tokenizer.default()
    return _DEFAULT_TOKENIZER


@dataclass(frozen=True)
class TaskSpec:
    """A task distribution: input sampler plus deterministic labeling rule"""
    id: int
    name: str
    family: str
    input_domain: Tuple[str, ...]
    label_domain: Tuple[str, ...]
    rule: Callable[[Input], str] = field(repr=False, compare=False)
    sample_input: Callable[[np.random.Generator], Input] = field(repr=False, compare=False)
    input_space_size: int = 0

    def label(self, x: Input) -> str:
        return self.rule(tuple(x))

    def sample(self, rng: np.random.Generator) -> Tuple[Input, str]:
        x = self.sample_input(rng)
        return x, self.rule(x)

    def render_input(self, x: Input) -> List[str]:
        """Token strings of an input (lists get brackets and commas)"""
        if self.family == "list_to_element":
            out = [LBRACKET]
            for i, e in enumerate(x):
                if i:
                    out.append(COMMA)
                out.append(e)
            out.append(RBRACKET)
            return out
        return list(x)


def _shift(c: str, n: int) -> str:
    return LOWER[(LOWER.index(c) + n) % len(LOWER)]


def _single(domain: Tuple[str, ...]):
    def sample(rng: np.random.Generator) -> Input:
        return (domain[int(rng.integers(len(domain)))],)
    return sample


def _list_sampler(rng: np.random.Generator) -> Input:
    n = int(rng.integers(LIST_MIN_LEN, LIST_MAX_LEN + 1))
    return tuple(LOWER[i] for i in rng.integers(len(LOWER), size=n))


LETTER_RULES: Dict[str, Tuple[Callable[[str], str], Tuple[str, ...]]] = {
    "copy": (lambda c: c, LOWER),
    "next": (lambda c: _shift(c, 1), LOWER),
    "prev": (lambda c: _shift(c, -1), LOWER),
    "next2": (lambda c: _shift(c, 2), LOWER),
    "upper": (lambda c: c.upper(), UPPER),
    "next_upper": (lambda c: _shift(c, 1).upper(), UPPER),
}

LIST_RULES: Dict[str, Tuple[Callable[[Input], str], Tuple[str, ...]]] = {
    "first": (lambda xs: xs[0], LOWER),
    "last": (lambda xs: xs[-1], LOWER),
    "length": (lambda xs: str(len(xs)), tuple(str(n) for n in range(LIST_MIN_LEN, LIST_MAX_LEN + 1))),
    "first_upper": (lambda xs: xs[0].upper(), UPPER),
    "last_upper": (lambda xs: xs[-1].upper(), UPPER),
}

LIST_SPACE = sum(len(LOWER) ** n for n in range(LIST_MIN_LEN, LIST_MAX_LEN + 1))


def _build_catalog() -> Dict[str, TaskSpec]:
    catalog: Dict[str, TaskSpec] = {}
    for name, (fn, labels) in LETTER_RULES.items():
        catalog[name] = TaskSpec(
            id=len(catalog), name=name, family="letter_to_letter",
            input_domain=LOWER, label_domain=labels,
            rule=lambda x, fn=fn: fn(x[0]), sample_input=_single(LOWER),
            input_space_size=len(LOWER),
        )
    for name, (fn, labels) in LIST_RULES.items():
        catalog[name] = TaskSpec(
            id=len(catalog), name=name, family="list_to_element",
            input_domain=LOWER, label_domain=labels,
            rule=fn, sample_input=_list_sampler, input_space_size=LIST_SPACE,
        )
    for name, (kind, table) in MAPPING_TABLES.items():
        keys = tuple(sorted(table))
        catalog[name] = TaskSpec(
            id=len(catalog), name=name, family="mapping_table",
            input_domain=keys, label_domain=tuple(sorted(set(table.values()))),
            rule=lambda x, table=table: table[x[0]], sample_input=_single(keys),
            input_space_size=len(keys),
        )
    return catalog


TASKS: Dict[str, TaskSpec] = _build_catalog()


def get_tasks(names: Sequence[str]) -> List[TaskSpec]:
    unknown = [n for n in names if n not in TASKS]
    if unknown:
        raise ConfigError(f"unknown task(s): {', '.join(unknown)}; available: {', '.join(TASKS)}")
    return [TASKS[n] for n in names]


@dataclass(frozen=True)
class ICLInstance:
    """``x1 → y1 , … , xK → yK , xq →`` with the separator positions"""
    task_id: int
    demonstrations: Tuple[Tuple[Input, str], ...]
    query: Input
    gold: str
    tokens: Tuple[int, ...]
    sep_positions: Tuple[int, ...]
    corrupted: Tuple[int, ...] = ()

    @property
    def K(self) -> int:
        return len(self.demonstrations)

    @property
    def gold_id(self) -> int:
        return default_tokenizer().stoi[self.gold]

    def __len__(self) -> int:
        return len(self.tokens)


def instance_strings(task: TaskSpec, demonstrations: Sequence[Tuple[Input, str]], query: Input) -> List[str]:
    out: List[str] = []
    for x, y in demonstrations:
        out.extend(task.render_input(x))
        out.extend([ARROW, y, COMMA])
    out.extend(task.render_input(query))
    out.append(ARROW)
    return out


def build_instance(task: TaskSpec, demonstrations: Sequence[Tuple[Input, str]], query: Input, gold: str,
                   corrupted: Sequence[int] = (), p_max: Optional[int] = None,
                   tokenizer: Optional[Tokenizer] = None) -> ICLInstance:
    tok = tokenizer or default_tokenizer()
    ids = tok.encode_tokens(instance_strings(task, demonstrations, query))
    if p_max is not None and len(ids) > p_max:
        raise ContextOverflowError(
            f"K={len(demonstrations)} instance of task {task.name} needs {len(ids)} tokens, p_max={p_max}",
            {"length": len(ids), "p_max": p_max},
        )
    seps = tuple(i for i, t in enumerate(ids) if t == tok.sep_id)
    return ICLInstance(
        task_id=task.id,
        demonstrations=tuple((tuple(x), y) for x, y in demonstrations),
        query=tuple(query),
        gold=gold,
        tokens=tuple(ids),
        sep_positions=seps,
        corrupted=tuple(sorted(corrupted)),
    )


def _draw_distinct(task: TaskSpec, n: int, exclude: set, rng: np.random.Generator) -> List[Input]:
    if task.input_space_size - len(exclude) < n:
        raise DomainExhaustedError(
            f"task {task.name} has {task.input_space_size} inputs, cannot draw {n} more distinct ones "
            f"beside {len(exclude)} existing"
        )
    seen = set(exclude)
    out: List[Input] = []
    while len(out) < n:
        x = task.sample_input(rng)
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def make_instance(task: TaskSpec, K: int, rng: np.random.Generator, p_max: Optional[int] = None,
                  distinct: bool = False, query: Optional[Input] = None) -> ICLInstance:
    """K i.i.d. demonstrations plus a query from the same input distribution"""
    if K < 0:
        raise ValueError("K must be >= 0")
    if distinct:
        inputs = _draw_distinct(task, K, set(), rng)
    else:
        inputs = [task.sample_input(rng) for _ in range(K)]
    demos = [(x, task.label(x)) for x in inputs]
    q = tuple(query) if query is not None else task.sample_input(rng)
    return build_instance(task, demos, q, task.label(q), p_max=p_max)


def instance_rng(seed: int, stream: int, task: TaskSpec, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, stream, task.id, index))


def sample_dataset(tasks: Sequence[TaskSpec], N: int, K: int, seed: int, stream: int = STREAM_DATA,
                   p_max: Optional[int] = None, distinct: bool = False) -> List[ICLInstance]:
    """N instances per task, task-major; instance i of task t uses its own counter-based stream"""
    if N < 1:
        raise ValueError("N must be >= 1")
    if len({t.id for t in tasks}) != len(tasks):
        raise ValueError("tasks must have distinct ids")
    return [
        make_instance(task, K, instance_rng(seed, stream, task, i), p_max=p_max, distinct=distinct)
        for task in tasks
        for i in range(N)
    ]


def _wrong_label(task: TaskSpec, x: Input, rng: np.random.Generator) -> str:
    correct = task.label(x)
    wrong = [y for y in task.label_domain if y != correct]
    return wrong[int(rng.integers(len(wrong)))]


def corrupted_count(ratio: float, K: int) -> int:
    return int(math.floor(ratio * K + 1e-9))


def inject_noise(instance: ICLInstance, spec: NoiseSpec, task: TaskSpec, rng: np.random.Generator,
                 p_max: Optional[int] = None) -> ICLInstance:
    """Relabel chosen demonstrations with a uniformly drawn wrong label; the query is untouched"""
    K = instance.K
    if spec.mode == "ratio":
        n = corrupted_count(spec.ratio, K)
        chosen = sorted(int(i) for i in rng.choice(K, size=n, replace=False)) if n else []
    else:
        bad = [p for p in spec.positions if p >= K]
        if bad:
            raise NoiseSpecError(f"noise position {bad[0]} out of range for K={K}")
        chosen = list(spec.positions)
    if not chosen:
        return instance

    demos = list(instance.demonstrations)
    for i in chosen:
        x, _ = demos[i]
        demos[i] = (x, _wrong_label(task, x, rng))
    corrupted = sorted(set(instance.corrupted) | set(chosen))
    return build_instance(task, demos, instance.query, instance.gold, corrupted, p_max=p_max)


def extend_instance(instance: ICLInstance, mode: str, K_new: int, task: TaskSpec, rng: np.random.Generator,
                    p_max: Optional[int] = None) -> ICLInstance:
    """Grow the context to K_new demonstrations by cyclic repetition or fresh distinct samples"""
    K = instance.K
    if K_new < K:
        raise ValueError(f"K_new={K_new} is smaller than K={K}")
    demos = list(instance.demonstrations)
    if mode == "repeat":
        if K == 0 and K_new > 0:
            raise DomainExhaustedError("cannot repeat an empty context")
        demos += [demos[i % K] for i in range(K, K_new)]
    elif mode == "distinct":
        fresh = _draw_distinct(task, K_new - K, {x for x, _ in demos}, rng)
        demos += [(x, task.label(x)) for x in fresh]
    else:
        raise ValueError(f"unknown extension mode {mode!r}")
    return build_instance(task, demos, instance.query, instance.gold, instance.corrupted, p_max=p_max)


def tokenize(instance: ICLInstance, task: Optional[TaskSpec] = None,
             tokenizer: Optional[Tokenizer] = None) -> List[int]:
    tok = tokenizer or default_tokenizer()
    if task is None:
        return list(instance.tokens)
    return tok.encode_tokens(instance_strings(task, instance.demonstrations, instance.query))


def detokenize(ids: Iterable[int], tokenizer: Optional[Tokenizer] = None) -> str:
    return (tokenizer or default_tokenizer()).detokenize(ids)


def pad_batch(instances: Sequence[ICLInstance], pad_id: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Right-padded id matrix [B, p_longest] and true lengths"""
    lengths = np.array([len(inst) for inst in instances], dtype=np.int64)
    ids = np.full((len(instances), int(lengths.max())), pad_id, dtype=np.int64)
    for b, inst in enumerate(instances):
        ids[b, :lengths[b]] = inst.tokens
    return ids, lengths


DATASET_HEADER = ["task_id", "K", "token_ids", "sep_positions", "gold_id"]


def dump_dataset(instances: Sequence[ICLInstance], path: Union[str, Path]) -> Path:
    """Tab-separated dump, lists as space-separated integers"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(DATASET_HEADER)
        for inst in instances:
            writer.writerow([
                inst.task_id,
                inst.K,
                " ".join(str(t) for t in inst.tokens),
                " ".join(str(s) for s in inst.sep_positions),
                inst.gold_id,
            ])
    logger.info(f"Wrote {len(instances)} instances to {path}")
    return path


def load_dataset_rows(path: Union[str, Path]) -> List[Dict[str, object]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter="\t")
        return [
            {
                "task_id": int(row["task_id"]),
                "K": int(row["K"]),
                "token_ids": [int(t) for t in row["token_ids"].split()],
                "sep_positions": [int(s) for s in row["sep_positions"].split()],
                "gold_id": int(row["gold_id"]),
            }
            for row in reader
        ]


def with_query(instance: ICLInstance, task: TaskSpec, query: Input, p_max: Optional[int] = None) -> ICLInstance:
    """Same demonstrations, different query"""
    return build_instance(task, instance.demonstrations, query, task.label(query), instance.corrupted, p_max=p_max)


def zero_shot(task: TaskSpec, query: Input) -> ICLInstance:
    return build_instance(task, [], query, task.label(query))


__all__ = [
    "ICLInstance", "TaskSpec", "Tokenizer", "TASKS", "get_tasks", "make_instance", "sample_dataset",
    "inject_noise", "extend_instance", "tokenize", "detokenize", "pad_batch", "dump_dataset",
]
