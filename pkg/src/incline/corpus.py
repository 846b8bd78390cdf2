"""Deterministic synthetic bilingual data.

A "language" is a namespace of content tokens.  Language A (the
high-performing target) is the one the model is trained on; language B
(the low-performing source) uses a disjoint namespace related to A by a
seeded bijection.  Control tokens and answer labels are shared, the way
option labels ("A"/"B") are shared across languages in multiple-choice
prompts.

Vocabulary layout::

    0 BOS | 1 SEP | 2 STOP | 3.. answer labels | A content | B content

Every prompt is ``BOS c_1 ... c_n SEP``; the answer is read at the SEP
position.
"""

import enum
import functools
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import InvalidSpec, NotALanguageAToken
from .textio import LineReader, atomic_write_text, read_text

BOS, SEP, STOP = 0, 1, 2
N_CONTROL = 3
N_CLASSES = 2
ANSWER_TOKENS = tuple(range(N_CONTROL, N_CONTROL + N_CLASSES))
CONTENT_START = N_CONTROL + N_CLASSES


class Task(str, enum.Enum):
    MAJORITY = "majority"
    ANTISYMMETRIC = "antisymmetric"


class Domain(str, enum.Enum):
    TASK = "task"
    SHIFTED = "shifted"


@dataclass(frozen=True)
class BilingualSpec:
    n_content_tokens: int = 20
    n_shift_tokens: int = 6
    seq_len: int = 9
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    n_parallel: int = 500
    task: Task = Task.MAJORITY
    mapping_seed: int = 0
    seed: int = 0
    domain_tag: Domain = Domain.TASK
    target_lang: str = "A"
    source_lang: str = "B"

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "domain_tag", Domain(self.domain_tag))

    def validate(self):
        if self.n_content_tokens < 2 or self.n_content_tokens % 2:
            raise InvalidSpec("n_content_tokens must be an even number >= 2 (two class pools)")
        if self.n_shift_tokens < 0:
            raise InvalidSpec("n_shift_tokens must be >= 0")
        if self.seq_len < 1:
            raise InvalidSpec("seq_len must be >= 1")
        if self.task is Task.MAJORITY and self.seq_len % 2 == 0:
            raise InvalidSpec("majority task needs an odd seq_len (no ties)")
        if self.task is Task.ANTISYMMETRIC and self.seq_len % 2:
            raise InvalidSpec("antisymmetric task needs an even seq_len (equal halves)")
        for name in ("n_train", "n_val", "n_test", "n_parallel"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        if self.domain_tag is Domain.SHIFTED and self.n_shift_tokens < 1:
            raise InvalidSpec("shifted domain needs n_shift_tokens >= 1")
        for tag in (self.target_lang, self.source_lang):
            if not tag or any(ch.isspace() for ch in tag):
                raise InvalidSpec("language tags must be non-empty and contain no whitespace")
        if self.target_lang == self.source_lang:
            raise InvalidSpec("source and target language tags must differ")

    @property
    def n_lang_tokens(self):
        return self.n_content_tokens + self.n_shift_tokens

    @property
    def vocab_size(self):
        return CONTENT_START + 2 * self.n_lang_tokens

    @property
    def prompt_len(self):
        return self.seq_len + 2

    def check_vocab(self, vocab_size):
        if vocab_size < self.vocab_size:
            raise InvalidSpec(f"layout needs {self.vocab_size} token ids, model has {vocab_size}")

    def a_content(self):
        return range(CONTENT_START, CONTENT_START + self.n_lang_tokens)

    def b_content(self):
        start = CONTENT_START + self.n_lang_tokens
        return range(start, start + self.n_lang_tokens)

    def class_pool(self, c):
        half = self.n_content_tokens // 2
        return np.arange(CONTENT_START + c * half, CONTENT_START + (c + 1) * half)

    def shift_pool(self):
        start = CONTENT_START + self.n_content_tokens
        return np.arange(start, start + self.n_shift_tokens)


class TaskItem(NamedTuple):
    tokens: tuple
    answer_position: int
    gold: int


@dataclass
class TaskDataset:
    items: list
    lang: str
    task: Task

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


@dataclass
class ParallelCorpus:
    """Sentence pairs; ``source`` is the low-performing language."""

    pairs: list
    src: str
    tgt: str

    def __len__(self):
        return len(self.pairs)

    def sources(self):
        return [p[0] for p in self.pairs]

    def targets(self):
        return [p[1] for p in self.pairs]

    def head(self, n):
        return ParallelCorpus(self.pairs[:n], self.src, self.tgt)


@dataclass
class BilingualData:
    spec: BilingualSpec
    a_train: TaskDataset
    a_val: TaskDataset
    a_test: TaskDataset
    b_val: TaskDataset
    b_test: TaskDataset
    parallel: ParallelCorpus
    extras: dict = field(default_factory=dict)


# --- the token map ------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _permutation(n, mapping_seed):
    perm = np.random.default_rng([int(mapping_seed), 0x6D6170]).permutation(n)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n)
    return tuple(int(p) for p in perm), tuple(int(i) for i in inv)


def token_map(spec, token):
    """Language-A token -> language-B token.

    Content tokens go through a seeded permutation into B's namespace;
    answer labels and control tokens are shared and map to themselves.
    """
    token = int(token)
    if 0 <= token < CONTENT_START:
        return token
    a0 = CONTENT_START
    if a0 <= token < a0 + spec.n_lang_tokens:
        perm, _ = _permutation(spec.n_lang_tokens, spec.mapping_seed)
        return a0 + spec.n_lang_tokens + perm[token - a0]
    raise NotALanguageAToken(f"token {token} is not a language-A token")


def inverse_token_map(spec, token):
    token = int(token)
    if 0 <= token < CONTENT_START:
        return token
    b0 = CONTENT_START + spec.n_lang_tokens
    if b0 <= token < b0 + spec.n_lang_tokens:
        _, inv = _permutation(spec.n_lang_tokens, spec.mapping_seed)
        return CONTENT_START + inv[token - b0]
    raise NotALanguageAToken(f"token {token} is not a language-B token")


def translate(spec, tokens):
    return tuple(token_map(spec, t) for t in tokens)


def translate_dataset(spec, dataset, lang=None):
    items = [TaskItem(translate(spec, it.tokens), it.answer_position, token_map(spec, it.gold)) for it in dataset]
    return TaskDataset(items, lang or spec.source_lang, dataset.task)


# --- generation -------------------------------------------------------------


def _rng(spec, stream):
    return np.random.default_rng([int(spec.seed), stream])


def _balanced_labels(n, rng):
    labels = np.arange(n) % N_CLASSES
    return labels[rng.permutation(n)]


def _majority_content(spec, label, rng):
    n = spec.seq_len
    k = int(rng.integers((n + 1) // 2, n + 1))  # size of the majority
    major = rng.choice(spec.class_pool(label), size=k)
    minor = rng.choice(spec.class_pool(1 - label), size=n - k)
    content = np.concatenate([major, minor])
    return content[rng.permutation(n)]


def _antisymmetric_contents(spec, n_items, rng):
    """Mirror pairs: (x, y) labelled 0 and (y, x) labelled 1 share one bag of tokens."""
    half = spec.seq_len // 2
    out = []
    for j in range((n_items + 1) // 2):
        x = rng.choice(spec.class_pool(0), size=half)
        y = rng.choice(spec.class_pool(1), size=half)
        out.append((np.concatenate([x, y]), 0))
        out.append((np.concatenate([y, x]), 1))
    out = out[:n_items]
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def _contents(spec, n_items, rng):
    if spec.task is Task.ANTISYMMETRIC:
        return _antisymmetric_contents(spec, n_items, rng)
    labels = _balanced_labels(n_items, rng)
    return [(_majority_content(spec, int(c), rng), int(c)) for c in labels]


def _prompt(content):
    return (BOS,) + tuple(int(t) for t in content) + (SEP,)


def gen_task_items(spec, n_items, stream):
    rng = _rng(spec, stream)
    items = []
    for content, label in _contents(spec, n_items, rng):
        tokens = _prompt(content)
        items.append(TaskItem(tokens, len(tokens) - 1, ANSWER_TOKENS[label]))
    return TaskDataset(items, spec.target_lang, spec.task)


def gen_parallel(spec, n_pairs=None, stream=4):
    n_pairs = spec.n_parallel if n_pairs is None else n_pairs
    rng = _rng(spec, stream if spec.domain_tag is Domain.TASK else stream + 100)
    if spec.domain_tag is Domain.TASK:
        contents = [c for c, _ in _contents(spec, n_pairs, rng)]
    else:
        pool = spec.shift_pool()
        contents = [rng.choice(pool, size=spec.seq_len) for _ in range(n_pairs)]
    pairs = []
    for content in contents:
        tgt = _prompt(content)
        pairs.append((translate(spec, tgt), tgt))
    return ParallelCorpus(pairs, spec.source_lang, spec.target_lang)


def gen_bilingual(spec):
    """Task splits in A, their B translations (val/test) and the parallel corpus.

    Each part is drawn from its own seeded stream, so changing
    ``domain_tag`` or ``n_parallel`` leaves the task splits untouched.
    """
    spec.validate()
    a_train = gen_task_items(spec, spec.n_train, 1)
    a_val = gen_task_items(spec, spec.n_val, 2)
    a_test = gen_task_items(spec, spec.n_test, 3)
    return BilingualData(
        spec=spec,
        a_train=a_train,
        a_val=a_val,
        a_test=a_test,
        b_val=translate_dataset(spec, a_val),
        b_test=translate_dataset(spec, a_test),
        parallel=gen_parallel(spec),
    )


def bag_of_tokens(dataset, vocab):
    """Token-frequency vectors (rows sum to 1) over ``vocab`` ids, excluding control tokens."""
    index = {t: i for i, t in enumerate(vocab)}
    out = np.zeros((len(dataset), len(index)))
    for r, item in enumerate(dataset):
        content = [t for t in item.tokens if t in index]
        for t in content:
            out[r, index[t]] += 1.0
        if content:
            out[r] /= len(content)
    return out


def class_mean_gap(dataset, vocab):
    """Norm of the difference between class-conditional mean bag-of-token vectors."""
    bags = bag_of_tokens(dataset, vocab)
    gold = np.array([it.gold for it in dataset])
    classes = sorted(set(gold.tolist()))
    if len(classes) != 2:
        raise ValueError("need exactly two classes")
    m0 = bags[gold == classes[0]].mean(axis=0)
    m1 = bags[gold == classes[1]].mean(axis=0)
    return float(np.linalg.norm(m0 - m1))


# --- serialization ----------------------------------------------------------


def _ids(seq):
    return " ".join(str(int(t)) for t in seq)


def corpus_text(dataset):
    lines = [f"corpus v1 {dataset.lang} {Task(dataset.task).value}"]
    for it in dataset:
        lines.append(f"{_ids(it.tokens)} | {it.answer_position} {it.gold}")
    return "\n".join(lines) + "\n"


def parallel_text(corpus):
    lines = [f"parallel v1 {corpus.src} {corpus.tgt}"]
    for src, tgt in corpus.pairs:
        lines.append(f"{_ids(src)} -> {_ids(tgt)}")
    return "\n".join(lines) + "\n"


def save_corpus(path, dataset):
    atomic_write_text(path, corpus_text(dataset))


def save_parallel(path, corpus):
    atomic_write_text(path, parallel_text(corpus))


def _parse_ids(text, reader, vocab_size):
    try:
        ids = tuple(int(t) for t in text.split())
    except ValueError:
        raise reader.error("token ids must be integers") from None
    if not ids:
        raise reader.error("empty token sequence")
    for t in ids:
        if t < 0 or (vocab_size is not None and t >= vocab_size):
            raise reader.error(f"token id {t} is out of vocabulary")
    return ids


def parse_corpus(text, vocab_size=None, path=None):
    reader = LineReader(text, path)
    head = reader.next("header").split()
    if len(head) != 4 or head[:2] != ["corpus", "v1"]:
        raise reader.error("expected header 'corpus v1 <lang> <task>'")
    try:
        task = Task(head[3])
    except ValueError:
        raise reader.error(f"unknown task {head[3]!r}") from None
    items = []
    while not reader.at_end():
        line = reader.next()
        if " | " not in line:
            raise reader.error("expected '<ids> | <answer_position> <gold>'")
        left, right = line.split(" | ", 1)
        tokens = _parse_ids(left, reader, vocab_size)
        parts = right.split()
        if len(parts) != 2:
            raise reader.error("expected '<answer_position> <gold>' after '|'")
        try:
            pos, gold = int(parts[0]), int(parts[1])
        except ValueError:
            raise reader.error("answer position and gold must be integers") from None
        if not 0 <= pos < len(tokens):
            raise reader.error(f"answer position {pos} outside the sequence")
        if gold < 0 or (vocab_size is not None and gold >= vocab_size):
            raise reader.error(f"gold token {gold} is out of vocabulary")
        items.append(TaskItem(tokens, pos, gold))
    return TaskDataset(items, head[2], task)


def parse_parallel(text, vocab_size=None, path=None):
    reader = LineReader(text, path)
    head = reader.next("header").split()
    if len(head) != 4 or head[:2] != ["parallel", "v1"]:
        raise reader.error("expected header 'parallel v1 <src> <tgt>'")
    pairs = []
    while not reader.at_end():
        line = reader.next()
        if " -> " not in line:
            raise reader.error("expected '<src ids> -> <tgt ids>'")
        left, right = line.split(" -> ", 1)
        src, tgt = _parse_ids(left, reader, vocab_size), _parse_ids(right, reader, vocab_size)
        if len(src) != len(tgt):
            raise reader.error(f"pair lengths differ ({len(src)} vs {len(tgt)})")
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, head[2], head[3])


def load_corpus(path, vocab_size=None):
    return parse_corpus(read_text(path), vocab_size, path=path)


def load_parallel(path, vocab_size=None):
    return parse_parallel(read_text(path), vocab_size, path=path)


# spec files let the CLI rebuild vocab layouts from a data directory
_SPEC_MAGIC = "bilingual v1"


def spec_text(spec):
    lines = [_SPEC_MAGIC]
    for f in fields(spec):
        value = getattr(spec, f.name)
        if isinstance(value, enum.Enum):
            value = value.value
        lines.append(f"{f.name} {value}")
    lines.append(f"vocab_size {spec.vocab_size}")
    return "\n".join(lines) + "\n"


def parse_spec(text, path=None):
    reader = LineReader(text, path)
    if reader.next("header").strip() != _SPEC_MAGIC:
        raise reader.error(f"expected header {_SPEC_MAGIC!r}")
    types = {f.name: f.type for f in fields(BilingualSpec)}
    values = {}
    while not reader.at_end():
        parts = reader.next().split()
        if len(parts) != 2:
            raise reader.error("expected '<key> <value>'")
        key, raw = parts
        if key == "vocab_size":
            continue
        if key not in types:
            raise reader.error(f"unknown key {key!r}")
        values[key] = int(raw) if types[key] in (int, "int") else raw
    spec = BilingualSpec(**values)
    spec.validate()
    return spec


def save_spec(path, spec):
    atomic_write_text(path, spec_text(spec))


def load_spec(path):
    return parse_spec(read_text(path), path=path)


def spec_dict(spec):
    d = asdict(spec)
    d["task"] = spec.task.value
    d["domain_tag"] = spec.domain_tag.value
    return d


def with_overrides(spec, **kw):
    return replace(spec, **kw)
