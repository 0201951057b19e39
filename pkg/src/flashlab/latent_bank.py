"""Latent task bank: frozen orthonormal keys, trainable low-rank increments.

The bank holds groups x keys_per_group latent tasks.  Each carries a frozen
unit key (rows of a QR-orthonormalized Gaussian matrix, orthonormal WITHIN its
group — with more total keys than key dimensions, global orthogonality is
impossible) and one trainable (A, B) pair per adapter target, A zero-init and
B Gaussian, so a fresh bank contributes exactly nothing to the forward pass.

A prompt is routed by a frozen bag-of-tokens encoder: mean of random embedding
rows, L2-normalized.  Retrieval ranks keys of the prompt's group by cosine
similarity (plain dot products — everything is unit norm); the top-k tasks'
increments are mixed with similarity weights normalized to sum to one.
Negative similarities are clamped to zero; if nothing positive survives, the
mix falls back to uniform weights and bumps an observable counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class BankConfig:
    groups: int = 16
    keys_per_group: int = 12
    top_k: int = 2
    key_dim: int = 64
    rank: int = 8
    init_std: float = 0.02
    seed: int = 0
    global_retrieval: bool = False

    def __post_init__(self):
        if min(self.groups, self.keys_per_group, self.top_k,
               self.key_dim, self.rank) < 1:
            raise ValueError(f"degenerate bank config: {self}")
        if self.top_k > self.keys_per_group and not self.global_retrieval:
            raise ValueError(
                f"top_k {self.top_k} exceeds keys_per_group {self.keys_per_group}")
        if self.keys_per_group > self.key_dim:
            raise ValueError(
                f"cannot build {self.keys_per_group} orthonormal keys in "
                f"{self.key_dim} dimensions")


class LatentTask:
    """One frozen key plus trainable increment factors for every target."""

    __slots__ = ("group", "index", "key", "params")

    def __init__(self, group: int, index: int, key: np.ndarray,
                 params: dict[str, Tensor]):
        self.group = group
        self.index = index
        self.key = key
        self.params = params  # f"{target}.A" / f"{target}.B" -> Tensor

    @property
    def name(self) -> str:
        return f"group{self.group}.task{self.index}"


def _orthonormal_rows(rng: np.random.Generator, n_rows: int, dim: int) -> np.ndarray:
    """n_rows orthonormal rows in dim dimensions (QR with a sign convention)."""
    g = rng.standard_normal((dim, n_rows))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).T


class LatentBank:
    """groups x keys_per_group latent tasks plus retrieval/mixing logic."""

    def __init__(self, cfg: BankConfig, tasks: list[list[LatentTask]]):
        self.cfg = cfg
        self.tasks = tasks
        self.fallback_count = 0  # times mixing fell back to uniform weights

    def group_keys(self, group: int) -> np.ndarray:
        return np.stack([t.key for t in self.tasks[group]])

    def all_tasks(self) -> list[LatentTask]:
        return [t for group in self.tasks for t in group]

    def latent_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for task in self.all_tasks():
            for pname, tensor in task.params.items():
                out.append((f"bank.{task.name}.{pname}", tensor))
        return out

    def set_trainable(self, flag: bool) -> None:
        for _, tensor in self.latent_params():
            tensor.requires_grad = flag

    def retrieve(self, query: np.ndarray, group: int,
                 k: int | None = None) -> list[tuple[LatentTask, float]]:
        """Top-k tasks of the prompt's group by key-query cosine similarity.

        Ties break toward the lower key index.  With global_retrieval set the
        candidate pool is every group's keys.
        """
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.cfg.key_dim,):
            raise ValueError(f"query shape {q.shape} != ({self.cfg.key_dim},)")
        if not np.isfinite(q).all():
            raise ValueError("query has non-finite entries")
        if abs(float(q @ q) - 1.0) > 1e-6:
            raise ValueError("query must be unit-norm")
        if self.cfg.global_retrieval:
            pool = self.all_tasks()
        else:
            if not 0 <= group < self.cfg.groups:
                raise ValueError(f"group {group} out of range [0, {self.cfg.groups})")
            pool = self.tasks[group]
        k = self.cfg.top_k if k is None else k
        if not 1 <= k <= len(pool):
            raise ValueError(f"k {k} out of range [1, {len(pool)}]")
        scored = [(task, float(task.key @ q)) for task in pool]
        scored.sort(key=lambda ts: (-ts[1],
                                    ts[0].group * self.cfg.keys_per_group
                                    + ts[0].index))
        return scored[:k]

    def mix_weights(self,
                    retrieved: list[tuple[LatentTask, float]]
                    ) -> list[tuple[LatentTask, float]]:
        """Normalized mixing weights in canonical (group, index) order.

        Similarities clamp at zero and normalize to sum to 1; tasks whose
        weight clamps away are dropped (they contribute nothing and must
        receive no gradient).  If every similarity clamps away, fall back to
        uniform weights over the retrieved set and bump the fallback counter.
        """
        if not retrieved:
            raise ValueError("mix_increments: empty retrieval list")
        items = sorted(retrieved, key=lambda ts: (ts[0].group, ts[0].index))
        clamped = [max(sim, 0.0) for _, sim in items]
        total = sum(clamped)
        if total <= 0.0:
            self.fallback_count += 1
            return [(task, 1.0 / len(items)) for task, _ in items]
        return [(task, w / total) for (task, _), w in zip(items, clamped) if w > 0.0]

    def increments_from_weights(self,
                                weighted: list[tuple[LatentTask, float]]
                                ) -> dict[str, Tensor]:
        """Weighted sum of B @ A per target, differentiable in every A/B."""
        targets = [p[:-2] for p in weighted[0][0].params if p.endswith(".A")]
        out: dict[str, Tensor] = {}
        for target in targets:
            acc = None
            for task, w in weighted:
                delta = ad.matmul(task.params[f"{target}.B"],
                                  task.params[f"{target}.A"])
                term = ad.mul_scalar(delta, w)
                acc = term if acc is None else ad.add(acc, term)
            out[target] = acc
        return out

    def mix_increments(self,
                       retrieved: list[tuple[LatentTask, float]]
                       ) -> dict[str, Tensor]:
        """Similarity-weighted mix of retrieved increments, per target.

        Weight computation and graph construction are split into
        mix_weights / increments_from_weights; this is the one-call form.
        The summation order is canonical, so the result does not depend on
        the order of the retrieved list.
        """
        return self.increments_from_weights(self.mix_weights(retrieved))

    def to_arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays = []
        for g, group in enumerate(self.tasks):
            arrays.append((f"bank.group{g}.keys", self.group_keys(g)))
            for task in group:
                for pname, tensor in task.params.items():
                    arrays.append((f"bank.{task.name}.{pname}", tensor.data))
        return arrays


def init_bank(cfg: BankConfig,
              target_shapes: dict[str, tuple[int, int]]) -> LatentBank:
    """Seeded bank: orthonormal keys per group, zero-A / Gaussian-B factors."""
    rng = np.random.default_rng(cfg.seed)
    groups = []
    for g in range(cfg.groups):
        keys = _orthonormal_rows(rng, cfg.keys_per_group, cfg.key_dim)
        tasks = []
        for i in range(cfg.keys_per_group):
            params: dict[str, Tensor] = {}
            for target, (d_in, d_out) in target_shapes.items():
                params[f"{target}.A"] = Tensor(np.zeros((cfg.rank, d_out)))
                params[f"{target}.B"] = Tensor(
                    rng.normal(0, cfg.init_std, (d_in, cfg.rank)))
            tasks.append(LatentTask(g, i, keys[i], params))
        groups.append(tasks)
    return LatentBank(cfg, groups)


def bank_from_arrays(cfg: BankConfig,
                     arrays: dict[str, np.ndarray]) -> LatentBank:
    """Rebuild a bank from checkpoint arrays (inverse of to_arrays)."""
    groups = []
    for g in range(cfg.groups):
        keys = arrays[f"bank.group{g}.keys"]
        tasks = []
        for i in range(cfg.keys_per_group):
            prefix = f"bank.group{g}.task{i}."
            params = {name[len(prefix):]: Tensor(arr)
                      for name, arr in arrays.items()
                      if name.startswith(prefix)}
            if not params:
                raise ValueError(f"checkpoint missing arrays for {prefix}*")
            tasks.append(LatentTask(g, i, keys[i].copy(), params))
        groups.append(tasks)
    return LatentBank(cfg, groups)


class PromptEncoder:
    """Frozen bag-of-tokens query encoder: mean of random rows, normalized."""

    def __init__(self, vocab_size: int, dim: int, seed: int):
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((vocab_size, dim))
        self.seed = seed

    def encode(self, tokens) -> np.ndarray:
        """Unit-norm query; order-invariant in the tokens.  Rejects empty."""
        toks = np.asarray(list(tokens), dtype=np.int64)
        if toks.size == 0:
            raise ValueError("encode: empty prompt")
        if toks.min() < 0 or toks.max() >= self.table.shape[0]:
            raise ValueError(
                f"encode: token id out of range [0, {self.table.shape[0]})")
        # Summation order must not leak into the query: canonicalize so the
        # same multiset of tokens gives the bitwise-same vector.
        toks = np.sort(toks)
        vec = self.table[toks].mean(axis=0)
        norm = float(np.sqrt(vec @ vec))
        if norm < 1e-12:
            raise ValueError("encode: degenerate zero query")
        return vec / norm


def assign_groups(n_items: int, groups: int, seed: int) -> np.ndarray:
    """Uniform iid group id per item (the joint random partition)."""
    if n_items < 0 or groups < 1:
        raise ValueError(f"assign_groups({n_items}, {groups})")
    return np.random.default_rng(seed).integers(0, groups, n_items)
