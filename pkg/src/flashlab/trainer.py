"""Warm-up and adaptation loops.

The adaptation loop interleaves two streams through one windowed
accumulator: supervised items (new-task pairs, teacher-forced cross
entropy) and flashback items (label-free old-task prompts scored by the
symmetric divergence against a frozen reference model).  Per window the two
accumulated gradients are optionally run through conflict surgery, summed,
and applied with Adam.  Latent-task increments join the forward pass when
joint latent learning is on; their gradients ride in the same window.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .autodiff import Tape, Tensor, slice2d
from .flashback import FlashbackItem, build_flashbacks, verify_provenance
from .gradproj import (FlatGrad, flatten, pcgrad_pair, project_away_conflict,
                       unflatten)
from .latent_bank import (BankConfig, LatentBank, PromptEncoder,
                          assign_groups, init_bank)
from .losses import LossBreakdown, combine, div_loss, sft_loss
from .model import (EOS_TOKEN, ModelConfig, ModelState, forward, probe_hash,
                    target_shapes)
from .tasks import TaskData, evaluate, forgetting_metrics


def _derive(*parts: int) -> int:
    """Independent child seed from a tuple of integers."""
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


class WarmupError(RuntimeError):
    """Warm-up failed to reach the validation threshold; carries history."""

    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class RunConfig:
    """Everything that varies between runs; the model shape lives elsewhere."""

    # objective
    alpha: float = 1.0
    use_jtl: bool = True
    use_pcgrad: bool = True
    use_flashbacks: bool = True
    replay_mode: bool = False          # supervised old pairs replace flashbacks
    # flashback construction
    flashbacks_per_task: int = 30
    flashback_replication: int = 1
    top_p: float = 0.8
    # latent bank
    group_count: int = 16
    keys_per_group: int = 12
    top_k: int = 2
    key_dim: int = 64
    rank: int = 8
    bank_init_std: float = 0.02
    global_retrieval: bool = False
    # optimization
    learning_rate: float = 3e-4
    epochs: int = 3
    accumulation_steps: int = 4
    batch_size: int = 1
    pcgrad_per_item: bool = False
    pcgrad_per_matrix: bool = False
    # warm-up.  Modular addition only generalizes to held-out pairs through
    # a (mild) grokking transition; batched steps with weight decay get it
    # there in minutes where per-item updates without decay stall at chance.
    warmup_lr: float = 3e-3
    warmup_weight_decay: float = 0.3
    warmup_batch_size: int = 24
    warmup_max_epochs: int = 1000
    warmup_eval_every: int = 5
    warmup_threshold: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        for name in ("flashbacks_per_task", "flashback_replication", "epochs",
                     "accumulation_steps", "batch_size", "warmup_max_epochs",
                     "warmup_batch_size", "warmup_eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_weight_decay < 0:
            raise ValueError(
                f"warmup_weight_decay must be >= 0, got {self.warmup_weight_decay}")
        if not 0.0 < self.warmup_threshold <= 1.0:
            raise ValueError(
                f"warmup_threshold must be in (0, 1], got {self.warmup_threshold}")

    @property
    def window_size(self) -> int:
        return self.accumulation_steps * self.batch_size

    def bank_config(self) -> BankConfig:
        return BankConfig(groups=self.group_count,
                          keys_per_group=self.keys_per_group,
                          top_k=self.top_k, key_dim=self.key_dim,
                          rank=self.rank, init_std=self.bank_init_std,
                          seed=_derive(self.seed, 11),
                          global_retrieval=self.global_retrieval)


class Adam:
    """Adam with lazily created per-parameter state and decoupled decay."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, list] = {}   # name -> [step, m, v]

    def step(self, params: dict[str, Tensor],
             grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != param shape {p.shape} for {name}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = [0, np.zeros(p.shape), np.zeros(p.shape)]
            st[0] += 1
            t, m, v = st
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data


def teacher_arrays(prompt, answer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced inputs/targets plus the answer-positions loss mask.

    The sequence is prompt + answer + EOS; the mask covers every position
    whose target is an answer token or the EOS, i.e. targets[t] for
    t >= len(prompt) - 1.
    """
    toks = list(prompt) + list(answer) + [EOS_TOKEN]
    inputs = np.asarray(toks[:-1], dtype=np.int64)
    targets = np.asarray(toks[1:], dtype=np.int64)
    mask = np.zeros(len(targets), dtype=bool)
    mask[len(prompt) - 1:] = True
    return inputs, targets, mask


@dataclass(eq=False)
class TrainItem:
    """One element of the adaptation stream, with precomputed arrays."""

    kind: str                 # "sup" | "fb"
    task: str
    group: int
    query: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray | None = None    # sup only
    mask: np.ndarray | None = None       # sup only
    rows: tuple[int, int] | None = None  # fb only: continuation logit rows


def build_train_items(new_tasks: list[TaskData], old_tasks: list[TaskData],
                      flashbacks: list[FlashbackItem], cfg: RunConfig,
                      encoder: PromptEncoder) -> list[TrainItem]:
    """Assemble the (unshuffled) adaptation stream.

    Supervised items are every new-task training pair, plus -- in replay
    mode -- flashbacks_per_task labeled old-task pairs per old task.
    Supervised group ids come from a seeded uniform assignment; flashback
    items carry their own groups and queries.  Flashback items are
    replicated by reference, so reference-logit memoization spans replicas.
    """
    sup: list[tuple[str, tuple, tuple]] = []
    for task in new_tasks:
        for it in task.train:
            sup.append((task.spec.name, it.prompt, it.answer))
    if cfg.replay_mode:
        for t_idx, task in enumerate(old_tasks):
            pool = task.train
            if cfg.flashbacks_per_task > len(pool):
                raise ValueError(
                    f"replay wants {cfg.flashbacks_per_task} items per task "
                    f"but {task.spec.name} has only {len(pool)}")
            rng = np.random.default_rng(_derive(cfg.seed, 23, t_idx))
            picked = np.sort(rng.choice(len(pool), size=cfg.flashbacks_per_task,
                                        replace=False))
            for i in picked:
                sup.append((task.spec.name, pool[i].prompt, pool[i].answer))
    groups = assign_groups(len(sup), cfg.group_count, _derive(cfg.seed, 19))
    items: list[TrainItem] = []
    for i, (name, prompt, answer) in enumerate(sup):
        inputs, targets, mask = teacher_arrays(prompt, answer)
        items.append(TrainItem(kind="sup", task=name, group=int(groups[i]),
                               query=encoder.encode(prompt), inputs=inputs,
                               targets=targets, mask=mask))
    fb_items: list[TrainItem] = []
    for f in flashbacks:
        seq = f.prompt + f.reference
        fb_items.append(TrainItem(
            kind="fb", task=f.task, group=f.group, query=f.query,
            inputs=np.asarray(seq[:-1], dtype=np.int64),
            rows=(len(f.prompt) - 1, len(seq) - 1)))
    items.extend(fb_items * cfg.flashback_replication)
    return items


def _latent_key(param_name: str) -> str:
    # "bank.group3.task7.w1.A" -> "group3.task7"
    parts = param_name.split(".")
    return f"{parts[1]}.{parts[2]}"


class AdaptSession:
    """Windowed two-objective accumulation with optional surgery.

    jfa_step processes one item (forward, loss, backward, read gradients
    into the window's sft/div buffers); optimizer_update closes the window
    (divide by contributing item count, surgery, non-finite guard, Adam).
    They are public so a step-for-step external check can drive them
    directly.
    """

    def __init__(self, model: ModelState, reference: ModelState,
                 bank: LatentBank | None, cfg: RunConfig):
        self.model = model
        self.reference = reference
        self.bank = bank
        self.cfg = cfg
        self.opt = Adam(cfg.learning_rate)
        self._adapter_names = [n for n, _ in model.trainable_params()]
        self._params = dict(model.trainable_params())
        if bank is not None:
            self._params.update(bank.latent_params())
        self._ref_memo: dict[int, np.ndarray] = {}
        self._acc: dict[str, dict[str, np.ndarray]] = {"sft": {}, "div": {}}
        self._item_grads: list[tuple[str, dict[str, np.ndarray]]] = []
        self._window_items = 0
        self.n_sft_items = 0
        self.n_div_items = 0
        self.n_updates = 0
        self.n_skipped_nonfinite = 0
        self.expected_routing: set[str] = set()
        self.touched_latent: set[str] = set()
        self._model_moved = False

    @property
    def window_full(self) -> bool:
        return self._window_items >= self.cfg.window_size

    def _reference_rows(self, item: TrainItem) -> np.ndarray:
        cached = self._ref_memo.get(id(item))
        if cached is None:
            logits = forward(self.reference, item.inputs)
            lo, hi = item.rows
            cached = self._ref_memo[id(item)] = logits.data[lo:hi]
        return cached

    def jfa_step(self, item: TrainItem) -> LossBreakdown:
        ref_rows = self._reference_rows(item) if item.kind == "fb" else None
        weighted = None
        if self.cfg.use_jtl and self.bank is not None:
            retrieved = self.bank.retrieve(item.query, item.group)
            weighted = self.bank.mix_weights(retrieved)
        with Tape() as tape:
            incs = (self.bank.increments_from_weights(weighted)
                    if weighted else None)
            logits = forward(self.model, item.inputs, incs)
            if item.kind == "sup":
                loss = sft_loss(logits, item.targets, item.mask)
                weight = 1.0
                breakdown = combine(loss.item(), None, self.cfg.alpha)
            else:
                lo, hi = item.rows
                loss = div_loss(slice2d(logits, lo, hi, 0, logits.shape[1]),
                                ref_rows)
                weight = self.cfg.alpha
                breakdown = combine(None, loss.item(), self.cfg.alpha)
            tape.backward(loss)
        active = [t for t, _ in weighted] if weighted else []
        self._accumulate("sft" if item.kind == "sup" else "div", weight, active)
        # A zero-weight item contributes nothing to either buffer; letting it
        # occupy a window slot would only shrink the window mean (at alpha=0
        # every flashback would dilute the supervised gradient).
        if weight != 0.0:
            self._window_items += 1
        if item.kind == "sup":
            self.n_sft_items += 1
        else:
            self.n_div_items += 1
        return breakdown

    def _accumulate(self, which: str, weight: float, active: list) -> None:
        named: list[tuple[str, Tensor]] = list(self.model.trainable_params())
        for task in active:
            for pname, t in task.params.items():
                named.append((f"bank.{task.name}.{pname}", t))
        if weight != 0.0:
            buf = self._acc[which]
            item_grad = {} if self.cfg.pcgrad_per_item else None
            for name, t in named:
                if t.grad is None:
                    continue
                g = weight * t.grad
                if name in buf:
                    buf[name] += g
                else:
                    buf[name] = g
                if item_grad is not None:
                    item_grad[name] = g
            if item_grad is not None:
                self._item_grads.append((which, item_grad))
            # Until the first parameter update the adapted model equals the
            # reference bitwise (fresh increments are zero), so the dual-KL
            # sits at its exact minimum and flashback gradients are exactly
            # zero -- those retrievals cannot touch anything and are not
            # counted as expected.
            if which == "sft" or self._model_moved:
                self.expected_routing.update(t.name for t in active)
        for _, t in named:
            t.zero_grad()

    def optimizer_update(self) -> None:
        if self._window_items == 0:
            return
        n = float(self._window_items)
        acc_s, acc_d = self._acc["sft"], self._acc["div"]
        bank_names = sorted(k for k in set(acc_s) | set(acc_d)
                            if k.startswith("bank."))
        names = self._adapter_names + bank_names
        shapes = {name: self._params[name].shape for name in names}

        def mean_flat(acc: dict[str, np.ndarray]) -> FlatGrad:
            return flatten([(name, acc[name] / n if name in acc
                             else np.zeros(shapes[name])) for name in names])

        g_s, g_d = mean_flat(acc_s), mean_flat(acc_d)
        for name in bank_names:
            if np.any(acc_s.get(name, 0.0)) or np.any(acc_d.get(name, 0.0)):
                self.touched_latent.add(_latent_key(name))
        if self.cfg.use_pcgrad:
            if self.cfg.pcgrad_per_item:
                # Each item gradient is projected against the opposite
                # objective's window mean, then everything is summed.
                total_vals = np.zeros_like(g_s.values)
                for which, itemgrads in self._item_grads:
                    gi = flatten([(name, itemgrads[name] / n if name in itemgrads
                                   else np.zeros(shapes[name])) for name in names])
                    against = g_d if which == "sft" else g_s
                    proj = project_away_conflict(
                        gi, against, per_matrix=self.cfg.pcgrad_per_matrix)
                    total_vals += proj.values
                total = FlatGrad(total_vals, g_s.layout)
            else:
                total = pcgrad_pair(g_s, g_d,
                                    per_matrix=self.cfg.pcgrad_per_matrix)
        else:
            total = FlatGrad(g_s.values + g_d.values, g_s.layout)
        if not np.all(np.isfinite(total.values)):
            self.n_skipped_nonfinite += 1
            self._reset_window()
            return
        self.opt.step(self._params,
                      dict(unflatten(total, list(shapes.items()))))
        if np.any(total.values):
            self._model_moved = True
        self.n_updates += 1
        self._reset_window()

    def _reset_window(self) -> None:
        self._acc = {"sft": {}, "div": {}}
        self._item_grads = []
        self._window_items = 0


def warmup(model: ModelState, old_tasks: list[TaskData],
           cfg: RunConfig) -> list[dict]:
    """Train the full base on old-task pairs until mean val exact match
    reaches the threshold; raises WarmupError (with the evaluation history
    attached) if the epoch budget runs out first.

    Gradients are averaged over warmup_batch_size items per Adam step and
    validation runs every warmup_eval_every epochs (it costs a greedy decode
    per item, which would otherwise dominate the long mod-task tail).
    """
    model.set_trainable(base=True, adapter=False)
    params = dict(model.base_params())
    opt = Adam(cfg.warmup_lr, weight_decay=cfg.warmup_weight_decay)
    prepared = []
    for task in old_tasks:
        for it in task.train:
            prepared.append(teacher_arrays(it.prompt, it.answer))
    rng = np.random.default_rng(_derive(cfg.seed, 2000))
    history: list[dict] = []
    for epoch in range(cfg.warmup_max_epochs):
        losses = []
        accum: dict[str, np.ndarray] = {}
        count = 0
        for i in rng.permutation(len(prepared)):
            inputs, targets, mask = prepared[i]
            with Tape() as tape:
                loss = sft_loss(forward(model, inputs), targets, mask)
                tape.backward(loss)
            for name, t in params.items():
                if t.grad is not None:
                    if name in accum:
                        accum[name] += t.grad
                    else:
                        accum[name] = t.grad.copy()
                    t.zero_grad()
            count += 1
            if count == cfg.warmup_batch_size:
                opt.step(params, {k: v / count for k, v in accum.items()})
                accum, count = {}, 0
            losses.append(loss.item())
        if count:
            opt.step(params, {k: v / count for k, v in accum.items()})
        last = epoch == cfg.warmup_max_epochs - 1
        if (epoch + 1) % cfg.warmup_eval_every and not last:
            continue
        evals = [evaluate(model, t, "val") for t in old_tasks]
        mean_em = float(np.mean([e.exact_match for e in evals]))
        history.append({"epoch": epoch,
                        "mean_loss": float(np.mean(losses)),
                        "val_exact_match": {e.name: e.exact_match for e in evals},
                        "mean_val_exact_match": mean_em})
        if mean_em >= cfg.warmup_threshold:
            model.set_trainable(base=False, adapter=False)
            return history
    curve = ", ".join(f"{h['epoch']}:{h['mean_val_exact_match']:.3f}"
                      for h in history)
    raise WarmupError(
        f"warm-up stalled below {cfg.warmup_threshold} after "
        f"{cfg.warmup_max_epochs} epochs (val exact match at epoch: {curve})",
        history)


def _eval_dicts(evals) -> list[dict]:
    return [{"task": e.name, "exact_match": e.exact_match, "n": e.n}
            for e in evals]


def run(run_cfg: RunConfig, model_cfg: ModelConfig, suite: list[TaskData],
        warm_model: ModelState | None = None,
        flashbacks: list[FlashbackItem] | None = None):
    """One full experiment: (warm-up unless given) -> adaptation -> report.

    Returns (report, model, bank, flashbacks).  The report is a plain JSON-
    serializable dict with no timestamps or absolute paths, so identical
    configs reproduce identical bytes.  The reference model is probed
    before and after adaptation and any drift raises; so does a mismatch
    between latent tasks retrieved (with nonzero objective weight) and
    latent tasks that actually received gradient.
    """
    old = [t for t in suite if t.spec.role == "old"]
    new = [t for t in suite if t.spec.role == "new"]
    if not old or not new:
        raise ValueError("suite must contain both old and new tasks")
    if warm_model is None:
        model = ModelState.init(model_cfg, run_cfg.seed)
        warm_history = warmup(model, old, run_cfg)
    else:
        model = warm_model
        warm_history = None
    reference = model.frozen_copy()
    encoder = PromptEncoder(model_cfg.vocab_size, run_cfg.key_dim,
                            seed=_derive(run_cfg.seed, 7))
    bank = None
    if run_cfg.use_jtl:
        bank = init_bank(run_cfg.bank_config(), target_shapes(model_cfg))
    need_fb = run_cfg.use_flashbacks and not run_cfg.replay_mode
    if need_fb:
        if flashbacks is None:
            flashbacks = build_flashbacks(
                old, reference, encoder,
                n_per_task=run_cfg.flashbacks_per_task, top_p=run_cfg.top_p,
                seed=_derive(run_cfg.seed, 13), groups=run_cfg.group_count)
        verify_provenance(flashbacks, reference)
        fb_stream = flashbacks
    else:
        flashbacks = None
        fb_stream = []
    items = build_train_items(new, old, fb_stream, run_cfg, encoder)
    probes = [list(t.val[0].prompt) for t in suite]
    ref_probe_before = probe_hash(reference, probes)
    before = [evaluate(model, t, "test") for t in suite]
    model.set_trainable(base=False, adapter=True)
    if bank is not None:
        bank.set_trainable(True)
    session = AdaptSession(model, reference, bank, run_cfg)
    shuffle_rng = np.random.default_rng(_derive(run_cfg.seed, 1001))
    per_epoch = []
    evals = before
    for epoch in range(run_cfg.epochs):
        sft_losses, div_losses = [], []
        for i in shuffle_rng.permutation(len(items)):
            b = session.jfa_step(items[i])
            if b.sft is not None:
                sft_losses.append(b.sft)
            if b.div is not None:
                div_losses.append(b.div)
            if session.window_full:
                session.optimizer_update()
        session.optimizer_update()   # flush a partial trailing window
        evals = [evaluate(model, t, "test") for t in suite]
        per_epoch.append({
            "epoch": epoch,
            "mean_sft_loss": float(np.mean(sft_losses)) if sft_losses else None,
            "mean_div_loss": float(np.mean(div_losses)) if div_losses else None,
            "evals": _eval_dicts(evals)})
    after = evals
    ref_probe_after = probe_hash(reference, probes)
    if ref_probe_after != ref_probe_before:
        raise RuntimeError("reference model drifted during adaptation")
    if session.touched_latent != session.expected_routing:
        raise RuntimeError(
            "latent routing mismatch: gradient touched "
            f"{sorted(session.touched_latent)} but retrieval expected "
            f"{sorted(session.expected_routing)}")
    cfg_blob = {"model": asdict(model_cfg), "run": asdict(run_cfg)}
    report = {
        "code_version": __version__,
        "config": cfg_blob,
        "config_hash": hashlib.sha256(
            json.dumps(cfg_blob, sort_keys=True).encode()).hexdigest(),
        "warmup": warm_history,
        "reference_fingerprint": reference.fingerprint(),
        "reference_probe": {"before": ref_probe_before,
                            "after": ref_probe_after},
        "before": _eval_dicts(before),
        "per_epoch": per_epoch,
        "after": _eval_dicts(after),
        "forgetting": forgetting_metrics(before, after),
        "counters": {
            "n_sft_items": session.n_sft_items,
            "n_div_items": session.n_div_items,
            "n_updates": session.n_updates,
            "n_skipped_nonfinite": session.n_skipped_nonfinite,
            "latent_fallbacks": bank.fallback_count if bank else 0,
            "latent_tasks_touched": len(session.touched_latent)},
        "routing": {"expected": sorted(session.expected_routing),
                    "touched": sorted(session.touched_latent)},
    }
    return report, model, bank, flashbacks
