"""Tiny decoder-only transformer with low-rank adapters on every projection.

Forward composes effective weights W_eff = W_base + B_main @ A_main + delta,
where delta is an optional externally supplied per-target increment (the
latent-task mix).  A_main starts at zero, so a fresh adapter — and a fresh
increment set — leaves logits bitwise identical to the bare base model.

Architecture: learned token + absolute position embeddings, pre-norm blocks
(causal multi-head attention, GELU MLP), final norm, linear head.  No biases.
Causality is exact: masked attention columns carry probability 0.0, not an
epsilon.

The checkpoint format is a single byte-stable file: a magic line, a JSON
header (config, seeds, metadata, array directory), then raw little-endian
float64 buffers.  Round trips are bit-exact and re-saves are byte-identical,
so artifact hashes are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .losses import ref_probs

PAD_TOKEN = 0
EOS_TOKEN = 1

_CKPT_MAGIC = b"FLASHLAB-CKPT-1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 40
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 32
    adapter_rank: int = 8
    adapter_init_std: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 3 or self.d_model < 1 or self.n_layers < 1:
            raise ValueError(f"degenerate model config: {self}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_rank < 1 or self.max_seq_len < 2:
            raise ValueError(f"degenerate model config: {self}")


def target_names(cfg: ModelConfig) -> list[str]:
    """Adapter targets: every attention projection and MLP matrix, in order."""
    names = []
    for i in range(cfg.n_layers):
        for w in ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"):
            names.append(f"layers.{i}.{w}")
    return names


def target_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """(d_in, d_out) per adapter target; forward multiplies x @ W."""
    d, h = cfg.d_model, 4 * cfg.d_model
    shapes = {}
    for i in range(cfg.n_layers):
        for w in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            shapes[f"layers.{i}.{w}"] = (d, d)
        shapes[f"layers.{i}.mlp.w1"] = (d, h)
        shapes[f"layers.{i}.mlp.w2"] = (h, d)
    return shapes


class ModelState:
    """Base weights + main adapter pairs, with phase-controlled trainability."""

    def __init__(self, cfg: ModelConfig, seed: int,
                 base: dict[str, Tensor], adapter: dict[str, Tensor]):
        self.cfg = cfg
        self.seed = seed
        self.base = base
        self.adapter = adapter

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelState":
        """Fresh Gaussian base (std 0.02); adapter B Gaussian, A zero."""
        rng = np.random.default_rng(seed)
        std = 0.02
        base: dict[str, Tensor] = {}
        base["tok_emb"] = Tensor(rng.normal(0, std, (cfg.vocab_size, cfg.d_model)))
        base["pos_emb"] = Tensor(rng.normal(0, std, (cfg.max_seq_len, cfg.d_model)))
        shapes = target_shapes(cfg)
        for name in target_names(cfg):
            base[name] = Tensor(rng.normal(0, std, shapes[name]))
        base["head"] = Tensor(rng.normal(0, std, (cfg.d_model, cfg.vocab_size)))
        adapter: dict[str, Tensor] = {}
        for name in target_names(cfg):
            d_in, d_out = shapes[name]
            # Delta = B @ A with A zero-initialized: exactly no contribution
            # until training moves it.
            adapter[f"{name}.A"] = Tensor(np.zeros((cfg.adapter_rank, d_out)))
            adapter[f"{name}.B"] = Tensor(
                rng.normal(0, cfg.adapter_init_std, (d_in, cfg.adapter_rank)))
        return cls(cfg, seed, base, adapter)

    def base_params(self) -> list[tuple[str, Tensor]]:
        return [(f"base.{name}", t) for name, t in self.base.items()]

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        """The main-adapter tensors, in a fixed deterministic order."""
        return [(f"adapter.{name}", t) for name, t in self.adapter.items()]

    def set_trainable(self, base: bool, adapter: bool) -> None:
        for t in self.base.values():
            t.requires_grad = base
        for t in self.adapter.values():
            t.requires_grad = adapter

    def frozen_copy(self) -> "ModelState":
        base = {k: Tensor(t.data.copy()) for k, t in self.base.items()}
        adapter = {k: Tensor(t.data.copy()) for k, t in self.adapter.items()}
        return ModelState(self.cfg, self.seed, base, adapter)

    def fingerprint(self) -> str:
        """sha256 over base weights; identifies the frozen reference."""
        h = hashlib.sha256()
        for name, t in self.base_params():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


_mask_cache: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    m = _mask_cache.get(n)
    if m is None:
        m = np.tril(np.ones((n, n), dtype=bool))
        _mask_cache[n] = m
    return m


def _effective_weight(model: ModelState, name: str,
                      increments: dict[str, Tensor] | None) -> Tensor:
    w = model.base[name]
    a = model.adapter[f"{name}.A"]
    b = model.adapter[f"{name}.B"]
    w = ad.add(w, ad.matmul(b, a))
    if increments is not None and name in increments:
        inc = increments[name]
        if inc.shape != w.shape:
            raise ShapeError(f"increment {name}: {inc.shape} vs weight {w.shape}")
        w = ad.add(w, inc)
    return w


def _validate_tokens(cfg: ModelConfig, tokens, what: str) -> list[int]:
    toks = [int(t) for t in tokens]
    if not toks:
        raise ValueError(f"{what}: empty token sequence")
    if len(toks) > cfg.max_seq_len:
        raise ValueError(f"{what}: length {len(toks)} > max_seq_len {cfg.max_seq_len}")
    if min(toks) < 0 or max(toks) >= cfg.vocab_size:
        raise ValueError(f"{what}: token id out of range [0, {cfg.vocab_size})")
    return toks


def forward(model: ModelState, tokens,
            increments: dict[str, Tensor] | None = None) -> Tensor:
    """Logits (T, vocab) for a token sequence, teacher-forced."""
    cfg = model.cfg
    toks = _validate_tokens(cfg, tokens, "forward")
    if increments is not None:
        unknown = set(increments) - set(target_names(cfg))
        if unknown:
            raise KeyError(f"increments for unknown targets: {sorted(unknown)}")
    n = len(toks)
    head_dim = cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(head_dim)
    mask = _causal_mask(n)

    x = ad.add(ad.embedding_lookup(model.base["tok_emb"], toks),
               ad.embedding_lookup(model.base["pos_emb"], list(range(n))))
    for i in range(cfg.n_layers):
        w = {s: _effective_weight(model, f"layers.{i}.{s}", increments)
             for s in ("attn.wq", "attn.wk", "attn.wv", "attn.wo",
                       "mlp.w1", "mlp.w2")}
        h = ad.layer_norm(x)
        q = ad.matmul(h, w["attn.wq"])
        k = ad.matmul(h, w["attn.wk"])
        v = ad.matmul(h, w["attn.wv"])
        heads = []
        for j in range(cfg.n_heads):
            c0, c1 = j * head_dim, (j + 1) * head_dim
            qj = ad.slice2d(q, 0, n, c0, c1)
            kj = ad.slice2d(k, 0, n, c0, c1)
            vj = ad.slice2d(v, 0, n, c0, c1)
            scores = ad.mul_scalar(ad.matmul(qj, ad.transpose(kj)), scale)
            weights = ad.masked_softmax_rows(scores, mask)
            heads.append(ad.matmul(weights, vj))
        attn_out = ad.matmul(ad.concat(heads, axis=1), w["attn.wo"])
        x = ad.add(x, attn_out)
        h2 = ad.layer_norm(x)
        mlp = ad.matmul(ad.gelu(ad.matmul(h2, w["mlp.w1"])), w["mlp.w2"])
        x = ad.add(x, mlp)
    return ad.matmul(ad.layer_norm(x), model.base["head"])


def nucleus_candidates(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Token ids of the smallest probability-sorted prefix with mass >= top_p.

    Sorting is by descending probability with ties toward lower ids; the
    1e-12 slack keeps exact-boundary cases stable under float rounding.
    """
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p - 1e-12, side="left")) + 1
    return order[:cut]


def generate(model: ModelState, prompt, max_new: int,
             top_p: float = 0.8, seed: int = 0, greedy: bool = False) -> list[int]:
    """Sample a continuation; stops after emitting the end-of-sequence token.

    Nucleus sampling keeps the smallest probability-sorted prefix whose mass
    reaches top_p (ties broken toward lower token ids), renormalizes, and
    samples from a generator seeded per call — so the same (model, prompt,
    seed) always yields the same continuation.  greedy=True is the top_p -> 0
    limit: argmax at every step.
    """
    cfg = model.cfg
    toks = _validate_tokens(cfg, prompt, "generate")
    if max_new < 1:
        raise ValueError(f"generate: max_new must be >= 1, got {max_new}")
    if len(toks) + max_new > cfg.max_seq_len:
        raise ValueError(
            f"generate: prompt ({len(toks)}) + max_new ({max_new}) exceeds "
            f"max_seq_len {cfg.max_seq_len}")
    if not greedy and not (0.0 < top_p <= 1.0):
        raise ValueError(f"generate: top_p must be in (0, 1], got {top_p}")
    rng = np.random.default_rng(seed)
    seq = list(toks)
    out: list[int] = []
    for _ in range(max_new):
        logits = forward(model, seq)
        row = logits.data[-1]
        if greedy:
            tok = int(np.argmax(row))  # argmax ties resolve to the lowest id
        else:
            p = ref_probs(row[None, :])[0]
            cand = nucleus_candidates(p, top_p)
            cp = p[cand] / p[cand].sum()
            tok = int(rng.choice(cand, p=cp))
        out.append(tok)
        seq.append(tok)
        if tok == EOS_TOKEN:
            break
    return out


def probe_hash(model: ModelState, prompts: list[list[int]]) -> str:
    """sha256 over logits for fixed probe prompts; detects any drift."""
    h = hashlib.sha256()
    for prompt in prompts:
        h.update(forward(model, prompt).data.tobytes())
    return h.hexdigest()


# --- checkpointing ---------------------------------------------------------

def _gather_arrays(model: ModelState, bank) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"base.{n}", t.data) for n, t in model.base.items()]
    arrays += [(f"adapter.{n}", t.data) for n, t in model.adapter.items()]
    if bank is not None:
        arrays += bank.to_arrays()
    return arrays


def save_checkpoint(path, model: ModelState, bank=None,
                    meta: dict | None = None) -> None:
    """Write model (+ optional latent bank) to one byte-stable file."""
    arrays = _gather_arrays(model, bank)
    directory = []
    offset = 0
    for name, arr in arrays:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "config": asdict(model.cfg),
        "seed": model.seed,
        "bank_config": asdict(bank.cfg) if bank is not None else None,
        "meta": meta or {},
        "arrays": directory,
    }
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode())
        f.write(b"\n")
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, bank_or_None, meta).  Bit-exact."""
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(f.readline().decode())
        blob = f.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"] * 8
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    cfg = ModelConfig(**header["config"])
    base = {}
    adapter = {}
    for name, arr in arrays.items():
        if name.startswith("base."):
            base[name[len("base."):]] = Tensor(arr)
        elif name.startswith("adapter."):
            adapter[name[len("adapter."):]] = Tensor(arr)
    model = ModelState(cfg, header["seed"], base, adapter)
    bank = None
    if header["bank_config"] is not None:
        from .latent_bank import BankConfig, bank_from_arrays
        bank_arrays = {n: a for n, a in arrays.items() if n.startswith("bank.")}
        bank = bank_from_arrays(BankConfig(**header["bank_config"]), bank_arrays)
    return model, bank, header["meta"]
