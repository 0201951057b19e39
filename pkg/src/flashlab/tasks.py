"""Synthetic task suite: modular arithmetic and sequence manipulation.

Four fixed-vocabulary tasks over single-token symbols:

  old  modadd   (a + b) mod 17
  old  copy     echo a 1..8-symbol sequence
  new  reverse  emit the sequence reversed
  new  modsub   (a - b) mod 17

Every item renders as ``TASK_TOKEN operands... SEP answer...`` with one id
per symbol; training appends EOS after the answer.  Splits are seeded
permutations of the full enumerated instance space (mod tasks) or of a
rejection-sampled unique pool (sequence tasks), so train/validation/test
never share an instance.

The two mod tasks have only 17^2 = 289 distinct instances, so when the
requested sizes do not fit, their splits shrink proportionally to fill the
instance space (e.g. 2000/200/200 becomes 240/24/24).  A small dense space
is deliberate: with ~80% of all pairs in train, a 2-layer model can still
generalize to the held-out pairs in minutes, which an undersampled larger
space does not allow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import EOS_TOKEN, PAD_TOKEN, ModelState, generate

SEP_TOKEN = 2
NUM_BASE = 3          # value v in [0, 17) renders as token NUM_BASE + v
MODULUS = 17
MAX_SEQ_SYMBOLS = 8   # copy/reverse payload length 1..8
TASK_TOKENS = {"modadd": 20, "copy": 21, "reverse": 22, "modsub": 23}
ROLES = {"modadd": "old", "copy": "old", "reverse": "new", "modsub": "new"}


@dataclass(frozen=True)
class Item:
    prompt: tuple[int, ...]   # TASK_TOKEN operands... SEP
    answer: tuple[int, ...]   # answer symbols, EOS not included


@dataclass(frozen=True)
class TaskSpec:
    name: str
    role: str
    seed: int


@dataclass
class TaskData:
    spec: TaskSpec
    train: list[Item]
    val: list[Item]
    test: list[Item]

    @property
    def max_answer_len(self) -> int:
        return max(len(it.answer) for it in self.train + self.val + self.test)

    def split(self, name: str) -> list[Item]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _num(v: int) -> int:
    return NUM_BASE + v


def _mod_items(name: str, sign: int) -> list[Item]:
    """Every (a, b) instance of (a + sign*b) mod 17, enumerated."""
    task_tok = TASK_TOKENS[name]
    items = []
    for a in range(MODULUS):
        for b in range(MODULUS):
            ans = (a + sign * b) % MODULUS
            items.append(Item((task_tok, _num(a), _num(b), SEP_TOKEN),
                              (_num(ans),)))
    return items


def _seq_items(name: str, n_total: int, rng: np.random.Generator) -> list[Item]:
    """n_total unique random symbol sequences, rejection-sampled."""
    task_tok = TASK_TOKENS[name]
    seen: set[tuple[int, ...]] = set()
    items = []
    while len(items) < n_total:
        length = int(rng.integers(1, MAX_SEQ_SYMBOLS + 1))
        seq = tuple(int(v) for v in rng.integers(0, MODULUS, length))
        if seq in seen:
            continue
        seen.add(seq)
        payload = tuple(_num(v) for v in seq)
        answer = payload if name == "copy" else payload[::-1]
        items.append(Item((task_tok, *payload, SEP_TOKEN), answer))
    return items


def make_suite(seed: int,
               sizes: tuple[int, int, int] = (2000, 200, 200)) -> list[TaskData]:
    """The four tasks with disjoint splits; fully determined by the seed."""
    n_train, n_val, n_test = sizes
    total = n_train + n_val + n_test
    if min(sizes) < 1:
        raise ValueError(f"split sizes must be positive: {sizes}")
    suite = []
    for i, name in enumerate(("modadd", "copy", "reverse", "modsub")):
        task_seed = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        rng = np.random.default_rng(task_seed)
        if name in ("modadd", "modsub"):
            pool = _mod_items(name, 1 if name == "modadd" else -1)
            m_train, m_val, m_test = n_train, n_val, n_test
            if total > len(pool):
                # shrink proportionally to fill the 289-instance space
                factor = len(pool) / total
                m_train = max(1, int(n_train * factor))
                m_val = max(1, int(n_val * factor))
                m_test = max(1, int(n_test * factor))
                if m_train + m_val + m_test > len(pool):
                    raise ValueError(
                        f"{name}: cannot fit splits {sizes} into "
                        f"{len(pool)} instances")
            order = rng.permutation(len(pool))
            picked = [pool[j] for j in order[:m_train + m_val + m_test]]
        else:
            m_train, m_val, m_test = n_train, n_val, n_test
            picked = _seq_items(name, total, rng)
        suite.append(TaskData(TaskSpec(name, ROLES[name], task_seed),
                              picked[:m_train],
                              picked[m_train:m_train + m_val],
                              picked[m_train + m_val:]))
    return suite


@dataclass(frozen=True)
class EvalResult:
    name: str
    exact_match: float
    n: int


def decode_answer(model: ModelState, prompt, max_new: int) -> tuple[int, ...]:
    """Greedy continuation truncated at the end-of-sequence token."""
    out = generate(model, prompt, max_new, greedy=True)
    if EOS_TOKEN in out:
        out = out[:out.index(EOS_TOKEN)]
    return tuple(out)


def evaluate(model: ModelState, task: TaskData, split: str = "test") -> EvalResult:
    """Exact-match rate under greedy decoding over one split."""
    items = task.split(split)
    cap = task.max_answer_len + 4  # room for EOS plus slight overshoot
    hits = 0
    for it in items:
        if decode_answer(model, it.prompt, cap) == it.answer:
            hits += 1
    return EvalResult(task.spec.name, hits / len(items), len(items))


def forgetting_metrics(before: list[EvalResult],
                       after: list[EvalResult]) -> dict:
    """Per-task deltas plus old/new averages.  drop > 0 means forgetting."""
    b = {r.name: r for r in before}
    a = {r.name: r for r in after}
    if set(b) != set(a):
        raise ValueError(f"task sets differ: {sorted(b)} vs {sorted(a)}")
    unknown = set(b) - set(ROLES)
    if unknown:
        raise ValueError(f"unknown tasks: {sorted(unknown)}")
    per_task = {name: {"before": b[name].exact_match,
                       "after": a[name].exact_match,
                       "delta": a[name].exact_match - b[name].exact_match}
                for name in sorted(b)}

    def _mean(names, which):
        vals = [per_task[n][which] for n in names]
        return sum(vals) / len(vals) if vals else float("nan")

    old = [n for n in per_task if ROLES[n] == "old"]
    new = [n for n in per_task if ROLES[n] == "new"]
    return {
        "per_task": per_task,
        "old_em_before": _mean(old, "before"),
        "old_em_after": _mean(old, "after"),
        "old_drop": _mean(old, "before") - _mean(old, "after"),
        "new_em_before": _mean(new, "before"),
        "new_em_after": _mean(new, "after"),
        "new_gain": _mean(new, "after") - _mean(new, "before"),
    }


def write_items(path, task_name: str, items: list[Item]) -> None:
    """Line-delimited records: {"task":..., "prompt": [...], "answer": [...]}."""
    with open(path, "w") as f:
        for it in items:
            f.write(json.dumps({"task": task_name,
                                "prompt": list(it.prompt),
                                "answer": list(it.answer)},
                               sort_keys=True))
            f.write("\n")


def read_items(path) -> list[tuple[str, Item]]:
    out = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append((rec["task"],
                            Item(tuple(rec["prompt"]), tuple(rec["answer"]))))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: bad record ({exc})") from exc
    return out
