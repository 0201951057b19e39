"""Flashbacks: label-free old-task prompts paired with frozen-model output.

A flashback item holds an old-task validation prompt, the continuation the
frozen reference model sampled for it (nucleus, per-item seed), the prompt's
routing query, its group id, and a provenance hash binding all of that to the
reference model's fingerprint.  References are generated once and reused;
``verify_provenance`` regenerates each one and must reproduce it bit-for-bit
before training is allowed to consume the items.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .latent_bank import PromptEncoder, assign_groups
from .model import ModelState, generate
from .tasks import TaskData


@dataclass(frozen=True, eq=False)
class FlashbackItem:
    task: str
    prompt: tuple[int, ...]
    reference: tuple[int, ...]   # sampled continuation, may end with EOS
    query: np.ndarray            # unit-norm routing query
    group: int
    top_p: float
    gen_seed: int
    max_new: int
    provenance: str


def _provenance(model_fp: str, prompt, reference, top_p: float,
                gen_seed: int, max_new: int) -> str:
    payload = json.dumps([model_fp, list(prompt), list(reference),
                          top_p, gen_seed, max_new], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def build_flashbacks(old_tasks: list[TaskData], model: ModelState,
                     encoder: PromptEncoder, n_per_task: int = 30,
                     top_p: float = 0.8, seed: int = 0,
                     groups: int = 16) -> list[FlashbackItem]:
    """Sample prompts from each old task's validation split and pre-generate
    the frozen model's continuations.  Fully determined by (model, seed)."""
    if n_per_task < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n_per_task}")
    model_fp = model.fingerprint()
    raw = []
    for t_idx, task in enumerate(old_tasks):
        pool = task.val
        if len(pool) < n_per_task:
            raise ValueError(
                f"task {task.spec.name!r}: validation split has {len(pool)} "
                f"items, need {n_per_task} flashback prompts")
        sel_rng = np.random.default_rng(np.random.SeedSequence((seed, 17, t_idx)))
        picked = sel_rng.choice(len(pool), size=n_per_task, replace=False)
        max_new = task.max_answer_len + 4
        for i_idx, pool_i in enumerate(sorted(int(j) for j in picked)):
            prompt = pool[pool_i].prompt
            gen_seed = int(np.random.SeedSequence(
                (seed, 29, t_idx, i_idx)).generate_state(1)[0])
            reference = tuple(generate(model, prompt, max_new,
                                       top_p=top_p, seed=gen_seed))
            raw.append((task.spec.name, prompt, reference, gen_seed, max_new))
    group_ids = assign_groups(len(raw), groups, np.random.SeedSequence(
        (seed, 41)).generate_state(1)[0])
    items = []
    for (name, prompt, reference, gen_seed, max_new), group in zip(raw, group_ids):
        items.append(FlashbackItem(
            task=name, prompt=prompt, reference=reference,
            query=encoder.encode(prompt), group=int(group),
            top_p=top_p, gen_seed=gen_seed, max_new=max_new,
            provenance=_provenance(model_fp, prompt, reference, top_p,
                                   gen_seed, max_new)))
    return items


def replicate(items: list[FlashbackItem], factor: int) -> list[FlashbackItem]:
    """factor copies of each item, sharing the original payloads."""
    if factor < 1:
        raise ValueError(f"replication factor must be >= 1, got {factor}")
    return [item for item in items for _ in range(factor)]


def verify_provenance(items: list[FlashbackItem], model: ModelState) -> None:
    """Regenerate every reference from the frozen model and require an exact
    match (tokens and hash).  Raises ValueError on the first mismatch."""
    model_fp = model.fingerprint()
    for i, item in enumerate(items):
        regen = tuple(generate(model, item.prompt, item.max_new,
                               top_p=item.top_p, seed=item.gen_seed))
        if regen != item.reference:
            raise ValueError(
                f"flashback {i} ({item.task}): reference does not regenerate "
                f"bit-identically — got {regen}, stored {item.reference}")
        expect = _provenance(model_fp, item.prompt, item.reference,
                             item.top_p, item.gen_seed, item.max_new)
        if expect != item.provenance:
            raise ValueError(
                f"flashback {i} ({item.task}): provenance hash mismatch "
                f"(model changed since generation?)")


def write_flashbacks(path, items: list[FlashbackItem]) -> None:
    """One JSON record per line; queries round-trip exactly via repr floats."""
    with open(path, "w") as f:
        for item in items:
            f.write(json.dumps({
                "task": item.task,
                "prompt": list(item.prompt),
                "reference": list(item.reference),
                "query": [float(x) for x in item.query],
                "group": item.group,
                "top_p": item.top_p,
                "gen_seed": item.gen_seed,
                "max_new": item.max_new,
                "provenance": item.provenance,
            }, sort_keys=True))
            f.write("\n")


def read_flashbacks(path) -> list[FlashbackItem]:
    items = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                items.append(FlashbackItem(
                    task=rec["task"],
                    prompt=tuple(rec["prompt"]),
                    reference=tuple(rec["reference"]),
                    query=np.array(rec["query"], dtype=np.float64),
                    group=int(rec["group"]),
                    top_p=float(rec["top_p"]),
                    gen_seed=int(rec["gen_seed"]),
                    max_new=int(rec["max_new"]),
                    provenance=rec["provenance"],
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad record ({exc})") from exc
    return items
