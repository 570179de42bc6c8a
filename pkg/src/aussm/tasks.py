"""Generators for the ten algorithmic tasks and the train/val/test protocol.

Every sample is a timeline of equal-length ``input``, ``target`` and ``mask``
arrays. ``target[t]`` is ``input[t + 1]`` (teacher-forcing shift) and the
masked positions carry the answer the model is scored on. Token ids
``0 .. num_classes - 1`` are the answer classes of the task, so the model head
only needs ``num_classes`` outputs; operator tokens, ACT and PAD follow.

Each generator draws a task *content* (bits, moves, an expression, ...) and
hands it to :func:`render`, which is deterministic. Tests enumerate contents
directly to check labels exhaustively.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

TASK_IDS = (
    "repetition", "bucket_sort", "majority", "majority_count", "solve_equation",
    "mod_arith", "mod_arith_wo_braces", "cycle_nav", "parity", "set",
)


@dataclass(frozen=True)
class TaskConfig:
    """Vocabulary defaults; every field can be overridden per run."""

    modulus: int = 5
    cycle_size: int = 5
    sort_symbols: int = 8
    majority_symbols: int = 64
    max_brace_depth: int = 3
    max_len: int = 256


@dataclass(frozen=True)
class Vocab:
    """Token names by id. The first ``num_classes`` ids are the answers."""

    tokens: tuple[str, ...]
    num_classes: int

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def act(self) -> int:
        return self.tokens.index("ACT")

    @property
    def pad(self) -> int:
        return self.tokens.index("PAD")

    def id(self, name: str) -> int:
        return self.tokens.index(name)

    def ids(self, names) -> np.ndarray:
        index = {t: i for i, t in enumerate(self.tokens)}
        return np.array([index[str(n)] for n in names], dtype=np.int64)


@dataclass
class TaskSample:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.input)

    def key(self) -> bytes:
        return hashlib.blake2b(self.input.tobytes(), digest_size=16).digest()


@dataclass(frozen=True)
class SplitSpec:
    train_size: int = 10_000
    val_size: int = 1_000
    test_size: int = 10_000
    train_len: tuple[int, int] = (1, 40)
    val_len: tuple[int, int] = (40, 256)
    test_len: tuple[int, int] = (1, 256)
    seed: int = 0


@dataclass
class Splits:
    train: list[TaskSample]
    val: list[TaskSample]
    test: list[TaskSample]
    histograms: dict = field(default_factory=dict)
    rejected: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# vocabularies

_DIGIT_OPS = ("+", "-", "*", "(", ")", "=")


def vocab(task_id: str, cfg: TaskConfig = TaskConfig()) -> Vocab:
    check_task(task_id)
    special = ("ACT", "PAD")
    if task_id == "parity":
        return Vocab(("0", "1") + special, 2)
    if task_id == "cycle_nav":
        pos = tuple(str(i) for i in range(cfg.cycle_size))
        return Vocab(pos + ("+1", "-1", "STAY") + special, cfg.cycle_size)
    if task_id in ("mod_arith", "mod_arith_wo_braces", "solve_equation"):
        digits = tuple(str(i) for i in range(cfg.modulus))
        extra = ("x",) if task_id == "solve_equation" else ()
        return Vocab(digits + _DIGIT_OPS + extra + special, cfg.modulus)
    if task_id in ("repetition", "bucket_sort", "set"):
        return Vocab(tuple(str(i) for i in range(cfg.sort_symbols)) + special, cfg.sort_symbols)
    if task_id == "majority":
        return Vocab(tuple(str(i) for i in range(cfg.majority_symbols)) + special, cfg.majority_symbols)
    # majority_count: answers are counts 0..max_len; symbols reuse the low ids
    n = max(cfg.max_len + 1, cfg.majority_symbols)
    return Vocab(tuple(str(i) for i in range(n)) + special, cfg.max_len + 1)


def check_task(task_id: str) -> None:
    if task_id not in TASK_IDS:
        raise ConfigError(f"unsupported task {task_id!r}; choose from {', '.join(TASK_IDS)}")


def min_length(task_id: str) -> int:
    check_task(task_id)
    return {"cycle_nav": 2, "repetition": 3, "bucket_sort": 3, "set": 3,
            "mod_arith": 3, "mod_arith_wo_braces": 3, "solve_equation": 5}.get(task_id, 1)


# ---------------------------------------------------------------------------
# direct label functions

def majority_of(symbols) -> tuple[int, int]:
    """(most frequent symbol, its count); ties go to the smallest symbol."""
    counts = Counter(int(s) for s in symbols)
    top = max(counts.values())
    return min(s for s, c in counts.items() if c == top), top


def eval_mod(expr: list[str], modulus: int, x: int | None = None) -> int:
    """Value of an infix expression over Z_modulus with the usual precedence."""
    text = " ".join(str(x) if t == "x" else t for t in expr)
    return eval(text, {"__builtins__": {}}) % modulus  # noqa: S307 - tokens are generated, never user text


# ---------------------------------------------------------------------------
# rendering

def _timeline(tokens: np.ndarray, answers: dict[int, int], length: int, pad: int) -> TaskSample:
    """Build the shifted-target timeline; ``answers`` maps masked position -> label."""
    if len(tokens) > length:
        raise ContractError(f"content needs {len(tokens)} positions but length is {length}")
    inp = np.full(length, pad, dtype=np.int64)
    inp[: len(tokens)] = tokens
    target = np.full(length, pad, dtype=np.int64)
    target[:-1] = inp[1:]
    mask = np.zeros(length, dtype=np.int64)
    for pos, label in answers.items():
        target[pos] = label
        mask[pos] = 1
    return TaskSample(inp, target, mask)


def render(task_id: str, content, length: int | None = None, cfg: TaskConfig = TaskConfig()) -> TaskSample:
    """Deterministic sample for a task content, padded with PAD to ``length``.

    Contents: bit list (parity); symbol list (majority*, repetition,
    bucket_sort, set); move list of +1/-1/0 (cycle_nav); token list of an
    expression (mod_arith*); ``(expr_tokens, rhs)`` with one ``x`` leaf
    (solve_equation).
    """
    v = vocab(task_id, cfg)
    if task_id == "parity":
        bits = [int(b) for b in content]
        toks = np.array(bits, dtype=np.int64)
        answers = {len(bits) - 1: sum(bits) % 2}
    elif task_id in ("majority", "majority_count"):
        toks = np.array([int(s) for s in content], dtype=np.int64)
        sym, count = majority_of(toks)
        answers = {len(toks) - 1: sym if task_id == "majority" else count}
    elif task_id in ("repetition", "bucket_sort", "set"):
        seq = [int(s) for s in content]
        out = {"repetition": seq, "bucket_sort": sorted(seq), "set": sorted(set(seq))}[task_id]
        toks = np.array(seq + [v.act] + out, dtype=np.int64)
        k = len(seq)
        answers = {k + i: s for i, s in enumerate(out)}
    elif task_id == "cycle_nav":
        names = {1: "+1", -1: "-1", 0: "STAY"}
        moves = [int(m) for m in content]
        pos = sum(moves) % cfg.cycle_size
        toks = np.concatenate([v.ids(names[m] for m in moves), [pos]])
        answers = {len(moves) - 1: pos}
    elif task_id in ("mod_arith", "mod_arith_wo_braces"):
        expr = list(content)
        ans = eval_mod(expr, cfg.modulus)
        toks = np.concatenate([v.ids(expr + ["="]), [ans]])
        answers = {len(expr): ans}
    else:  # solve_equation
        expr, rhs = content
        expr = list(expr)
        sol = solve_for_x(expr, rhs, cfg.modulus)
        if len(sol) != 1:
            raise ContractError(f"equation must have exactly one solution, found {sol}")
        toks = np.concatenate([v.ids(expr + ["=", str(rhs), "ACT"]), [sol[0]]])
        answers = {len(expr) + 2: sol[0]}
    length = len(toks) if length is None else length
    return _timeline(toks, answers, length, v.pad)


def solve_for_x(expr: list[str], rhs: int, modulus: int) -> list[int]:
    return [x for x in range(modulus) if eval_mod(expr, modulus, x) == rhs % modulus]


# ---------------------------------------------------------------------------
# random contents

def _random_expr(n: int, rng: np.random.Generator, cfg: TaskConfig, braces: bool, depth: int = 0) -> list[str]:
    """Random expression of exactly ``n`` tokens (n odd)."""
    if n == 1:
        return [str(int(rng.integers(cfg.modulus)))]
    if braces and depth < cfg.max_brace_depth and rng.random() < 0.25:
        return ["("] + _random_expr(n - 2, rng, cfg, braces, depth + 1) + [")"]
    left = 2 * int(rng.integers(0, (n - 1) // 2)) + 1
    op = ("+", "-", "*")[int(rng.integers(3))]
    return (_random_expr(left, rng, cfg, braces, depth) + [op]
            + _random_expr(n - 1 - left, rng, cfg, braces, depth))


def _odd_at_most(n: int) -> int:
    return n if n % 2 else n - 1


def random_content(task_id: str, length: int, rng: np.random.Generator, cfg: TaskConfig = TaskConfig()):
    """Draw a content whose rendering fits in ``length`` positions."""
    if length < min_length(task_id):
        raise ContractError(f"{task_id} needs length >= {min_length(task_id)}, got {length}")
    if task_id == "parity":
        return rng.integers(0, 2, length).tolist()
    if task_id in ("majority", "majority_count"):
        return rng.integers(0, cfg.majority_symbols, length).tolist()
    if task_id in ("repetition", "bucket_sort", "set"):
        return rng.integers(0, cfg.sort_symbols, (length - 1) // 2).tolist()
    if task_id == "cycle_nav":
        return (rng.integers(0, 3, length - 1) - 1).tolist()
    if task_id in ("mod_arith", "mod_arith_wo_braces"):
        return _random_expr(_odd_at_most(length - 2), rng, cfg, task_id == "mod_arith")
    # solve_equation: one leaf becomes x; resample until x is determined uniquely
    n = _odd_at_most(length - 4)
    while True:
        expr = _random_expr(n, rng, cfg, braces=True)
        leaves = [i for i, t in enumerate(expr) if t.isdigit()]
        expr[leaves[int(rng.integers(len(leaves)))]] = "x"
        x = int(rng.integers(cfg.modulus))
        rhs = eval_mod(expr, cfg.modulus, x)
        if solve_for_x(expr, rhs, cfg.modulus) == [x]:
            return expr, rhs


def gen(task_id: str, length: int, rng: np.random.Generator, cfg: TaskConfig = TaskConfig()) -> TaskSample:
    """One random sample of exactly ``length`` positions."""
    check_task(task_id)
    return render(task_id, random_content(task_id, length, rng, cfg), length, cfg)


# ---------------------------------------------------------------------------
# splits

def _draw(task_id, size, bounds, rng, cfg, seen: set | None, rejected: Counter, name: str, max_tries: int):
    lo = max(bounds[0], min_length(task_id))
    hi = bounds[1]
    if lo > hi:
        raise ConfigError(f"empty length range {bounds} for {task_id}")
    out = []
    for _ in range(size):
        for _ in range(max_tries):
            s = gen(task_id, int(rng.integers(lo, hi + 1)), rng, cfg)
            if seen is None or s.key() not in seen:
                break
            rejected[name] += 1
        out.append(s)
    return out


def make_splits(task_id: str, spec: SplitSpec = SplitSpec(), cfg: TaskConfig = TaskConfig(),
                max_tries: int = 100) -> Splits:
    """Train/val/test streams from independent substreams of ``spec.seed``.

    Val and test redraw (with a fresh length) any sample whose input already
    occurs in an earlier split, up to ``max_tries`` attempts.
    """
    check_task(task_id)
    if max(spec.train_len[1], spec.val_len[1], spec.test_len[1]) > cfg.max_len:
        raise ConfigError("split lengths exceed TaskConfig.max_len")
    r_train, r_val, r_test = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    rejected: Counter = Counter()
    train = _draw(task_id, spec.train_size, spec.train_len, r_train, cfg, None, rejected, "train", 1)
    seen = {s.key() for s in train}
    val = _draw(task_id, spec.val_size, spec.val_len, r_val, cfg, seen, rejected, "val", max_tries)
    seen |= {s.key() for s in val}
    test = _draw(task_id, spec.test_size, spec.test_len, r_test, cfg, seen, rejected, "test", max_tries)
    hist = {name: dict(sorted(Counter(len(s) for s in split).items()))
            for name, split in (("train", train), ("val", val), ("test", test))}
    return Splits(train, val, test, hist, dict(rejected))


def collate(samples: list[TaskSample], pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad a list of samples into (batch, L_max) arrays; padding is unmasked."""
    length = max(len(s) for s in samples)
    b = len(samples)
    inp = np.full((b, length), pad, dtype=np.int64)
    tgt = np.full((b, length), pad, dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.int64)
    for i, s in enumerate(samples):
        inp[i, : len(s)] = s.input
        tgt[i, : len(s)] = s.target
        mask[i, : len(s)] = s.mask
    return inp, tgt, mask


def dump(path, task_id: str, samples: list[TaskSample], cfg: TaskConfig = TaskConfig()) -> None:
    """One sample per line: input, target and mask as space-separated ids, tab-separated."""
    with open(path, "w") as fh:
        fh.write("# " + json.dumps({"task": task_id, "config": asdict(cfg), "vocab": vocab(task_id, cfg).tokens}) + "\n")
        for s in samples:
            fh.write("\t".join(" ".join(map(str, a.tolist())) for a in (s.input, s.target, s.mask)) + "\n")


def load(path) -> tuple[dict, list[TaskSample]]:
    with open(path) as fh:
        header = json.loads(fh.readline()[2:])
        samples = []
        for line in fh:
            parts = [np.array(p.split(), dtype=np.int64) for p in line.rstrip("\n").split("\t")]
            samples.append(TaskSample(*parts))
    return header, samples
