"""Trainer tests.

The centerpiece is an independent plain-numpy training loop (own forward,
own backprop, own Adam) checked step-for-step against AdaptSession running
in plain supervised mode: per-step losses must agree to 1e-10.
"""

import json
import math

import numpy as np
import pytest

from flashlab.model import ModelConfig, ModelState, forward, target_names
from flashlab.latent_bank import PromptEncoder
from flashlab.tasks import make_suite
from flashlab.trainer import (Adam, AdaptSession, RunConfig, TrainItem,
                              WarmupError, build_train_items, run,
                              teacher_arrays, warmup)

_GC = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- reference
# Straight-line numpy forward + backprop + Adam, written independently of
# the package's tape.  Only adapter gradients are produced (base is frozen
# during adaptation).


def _ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(-1, keepdims=True) + eps)
    return (x - mu) * inv, inv


def _ln_back(dy, y, inv):
    return inv * (dy - dy.mean(-1, keepdims=True)
                  - y * (dy * y).mean(-1, keepdims=True))


def _gelu(x):
    t = np.tanh(_GC * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    d_inner = _GC * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)


def _msoftmax(scores, mask):
    z = np.where(mask, scores, -np.inf)
    e = np.exp(z - z.max(-1, keepdims=True))
    e = np.where(mask, e, 0.0)
    return e / e.sum(-1, keepdims=True)


class _RefLoop:
    """Reference SFT trainer over its own copies of the weights."""

    def __init__(self, model: ModelState, lr: float):
        cfg = model.cfg
        self.cfg = cfg
        self.base = {k: t.data.copy() for k, t in model.base.items()}
        self.adapter = {k: t.data.copy() for k, t in model.adapter.items()}
        self.lr = lr
        self.adam: dict[str, list] = {}

    def _weights(self, layer):
        out = {}
        for s in ("attn.wq", "attn.wk", "attn.wv", "attn.wo",
                  "mlp.w1", "mlp.w2"):
            name = f"layers.{layer}.{s}"
            out[s] = (self.base[name]
                      + self.adapter[f"{name}.B"] @ self.adapter[f"{name}.A"])
        return out

    def step(self, ids, targets, mask):
        cfg = self.cfg
        T = len(ids)
        hd = cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(hd)
        cmask = np.tril(np.ones((T, T), dtype=bool))
        x = self.base["tok_emb"][ids] + self.base["pos_emb"][:T]
        caches = []
        for li in range(cfg.n_layers):
            w = self._weights(li)
            h1, inv1 = _ln(x)
            q, k, v = h1 @ w["attn.wq"], h1 @ w["attn.wk"], h1 @ w["attn.wv"]
            heads, probs = [], []
            for j in range(cfg.n_heads):
                c = slice(j * hd, (j + 1) * hd)
                P = _msoftmax((q[:, c] @ k[:, c].T) * scale, cmask)
                probs.append(P)
                heads.append(P @ v[:, c])
            O = np.concatenate(heads, axis=1)
            attn = O @ w["attn.wo"]
            x2 = x + attn
            h2, inv2 = _ln(x2)
            a1 = h2 @ w["mlp.w1"]
            g1, tg = _gelu(a1)
            x3 = x2 + g1 @ w["mlp.w2"]
            caches.append((w, x, h1, inv1, q, k, v, probs, O, h2, inv2,
                           a1, g1, tg))
            x = x3
        y, invf = _ln(x)
        logits = y @ self.base["head"]

        mx = logits.max(-1, keepdims=True)
        z = logits - mx
        lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        n_masked = int(mask.sum())
        loss = -lp[mask, targets[mask]].sum() / n_masked

        G = np.exp(lp)
        onehot = np.zeros_like(G)
        onehot[np.arange(T)[mask], targets[mask]] = 1.0
        G = (G - onehot) * mask[:, None] / n_masked
        dx = _ln_back(G @ self.base["head"].T, y, invf)
        grads = {}
        for li in reversed(range(cfg.n_layers)):
            (w, x_in, h1, inv1, q, k, v, probs, O, h2, inv2,
             a1, g1, tg) = caches[li]
            dg1 = dx @ w["mlp.w2"].T
            dW2 = g1.T @ dx
            da1 = _gelu_back(dg1, a1, tg)
            dW1 = h2.T @ da1
            dx2 = dx + _ln_back(da1 @ w["mlp.w1"].T, h2, inv2)
            dO = dx2 @ w["attn.wo"].T
            dWo = O.T @ dx2
            dq = np.zeros_like(q)
            dk = np.zeros_like(k)
            dv = np.zeros_like(v)
            for j in range(cfg.n_heads):
                c = slice(j * hd, (j + 1) * hd)
                P = probs[j]
                doj = dO[:, c]
                dP = doj @ v[:, c].T
                dv[:, c] = P.T @ doj
                dS = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
                dq[:, c] = dS @ k[:, c]
                dk[:, c] = dS.T @ q[:, c]
            dWq, dWk, dWv = h1.T @ dq, h1.T @ dk, h1.T @ dv
            dh1 = dq @ w["attn.wq"].T + dk @ w["attn.wk"].T + dv @ w["attn.wv"].T
            dx = dx2 + _ln_back(dh1, h1, inv1)
            for s, dW in (("attn.wq", dWq), ("attn.wk", dWk), ("attn.wv", dWv),
                          ("attn.wo", dWo), ("mlp.w1", dW1), ("mlp.w2", dW2)):
                name = f"layers.{li}.{s}"
                A = self.adapter[f"{name}.A"]
                B = self.adapter[f"{name}.B"]
                grads[f"{name}.B"] = dW @ A.T
                grads[f"{name}.A"] = B.T @ dW

        for name, g in grads.items():
            st = self.adam.setdefault(name, [0, np.zeros(g.shape),
                                             np.zeros(g.shape)])
            st[0] += 1
            t, m, vv = st
            m *= 0.9
            m += 0.1 * g
            vv *= 0.999
            vv += 0.001 * g * g
            m_hat = m / (1.0 - 0.9 ** t)
            v_hat = vv / (1.0 - 0.999 ** t)
            self.adapter[name] -= self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        return loss


def _sup_item(prompt, answer):
    inputs, targets, mask = teacher_arrays(prompt, answer)
    return TrainItem(kind="sup", task="t", group=0, query=None,
                     inputs=inputs, targets=targets, mask=mask)


def test_plain_sft_session_matches_reference_loop_200_steps():
    mc = ModelConfig()
    suite = make_suite(3, sizes=(8, 2, 2))
    pool = [it for t in suite if t.spec.role == "new" for it in t.train]
    items = [_sup_item(it.prompt, it.answer) for it in pool[:8]]
    cfg = RunConfig(use_jtl=False, use_pcgrad=False, use_flashbacks=False,
                    accumulation_steps=1, batch_size=1, learning_rate=3e-4)
    model = ModelState.init(mc, 11)
    model.set_trainable(base=False, adapter=True)
    ref = _RefLoop(ModelState.init(mc, 11), lr=3e-4)
    session = AdaptSession(model, model.frozen_copy(), None, cfg)
    worst = 0.0
    for step in range(200):
        item = items[step % len(items)]
        b = session.jfa_step(item)
        session.optimizer_update()
        loss_ref = ref.step(item.inputs, item.targets, item.mask)
        worst = max(worst, abs(b.sft - loss_ref))
        assert b.sft == pytest.approx(loss_ref, abs=1e-10), f"step {step}"
    assert worst <= 1e-10
    for name in ref.adapter:
        np.testing.assert_allclose(model.adapter[name].data,
                                   ref.adapter[name], atol=1e-10)


# ------------------------------------------------------------------- pieces


def test_adam_matches_hand_rolled_updates():
    rng = np.random.default_rng(0)
    from flashlab.autodiff import Tensor
    p = Tensor(rng.normal(size=(3, 2)))
    start = p.data.copy()
    opt = Adam(lr=0.01)
    m = np.zeros((3, 2))
    v = np.zeros((3, 2))
    expect = start.copy()
    for t in range(1, 4):
        g = rng.normal(size=(3, 2))
        opt.step({"w": p}, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expect -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, expect, atol=1e-14)
    with pytest.raises(ValueError, match="shape"):
        opt.step({"w": p}, {"w": np.zeros(5)})


def test_teacher_arrays_layout():
    inputs, targets, mask = teacher_arrays((5, 6, 7), (8, 9))
    assert inputs.tolist() == [5, 6, 7, 8, 9]
    assert targets.tolist() == [6, 7, 8, 9, 1]       # trailing EOS
    assert mask.tolist() == [False, False, True, True, True]


def test_run_config_validation():
    with pytest.raises(ValueError, match="alpha"):
        RunConfig(alpha=-0.5)
    with pytest.raises(ValueError, match="top_p"):
        RunConfig(top_p=0.0)
    with pytest.raises(ValueError, match="epochs"):
        RunConfig(epochs=0)
    with pytest.raises(ValueError, match="warmup_threshold"):
        RunConfig(warmup_threshold=1.5)
    assert RunConfig(accumulation_steps=4, batch_size=2).window_size == 8


def test_build_train_items_counts_groups_and_replication():
    mc = ModelConfig()
    suite = make_suite(1, sizes=(10, 3, 3))
    old = [t for t in suite if t.spec.role == "old"]
    new = [t for t in suite if t.spec.role == "new"]
    enc = PromptEncoder(mc.vocab_size, 64, seed=0)
    model = ModelState.init(mc, 0)
    from flashlab.flashback import build_flashbacks
    fbs = build_flashbacks(old, model, enc, n_per_task=2, seed=0, groups=16)
    cfg = RunConfig(flashback_replication=3, flashbacks_per_task=2)
    items = build_train_items(new, old, fbs, cfg, enc)
    n_sup = sum(len(t.train) for t in new)
    n_fb = len(fbs)
    assert len(items) == n_sup + 3 * n_fb
    assert all(it.kind == "sup" for it in items[:n_sup])
    fb_items = items[n_sup:]
    assert all(it.kind == "fb" for it in fb_items)
    # replication shares objects, so reference memoization spans replicas
    assert fb_items[0] is fb_items[n_fb] is fb_items[2 * n_fb]
    assert all(0 <= it.group < 16 for it in items)
    lo, hi = fb_items[0].rows
    assert hi - lo == len(fbs[0].reference)
    assert hi == len(fb_items[0].inputs)
    # replay: supervised old pairs join the stream instead of flashbacks
    r_cfg = RunConfig(replay_mode=True, flashbacks_per_task=2)
    r_items = build_train_items(new, old, [], r_cfg, enc)
    assert len(r_items) == n_sup + 2 * len(old)
    assert all(it.kind == "sup" for it in r_items)
    old_names = {t.spec.name for t in old}
    assert sum(it.task in old_names for it in r_items) == 2 * len(old)


def test_two_identical_items_in_one_window_match_single_item_step():
    mc = ModelConfig()
    item = _sup_item((20, 4, 5, 6, 2), (9,))
    outcomes = []
    for acc, reps in ((1, 1), (2, 2)):
        cfg = RunConfig(use_jtl=False, use_pcgrad=False, use_flashbacks=False,
                        accumulation_steps=acc, batch_size=1)
        model = ModelState.init(mc, 7)
        model.set_trainable(base=False, adapter=True)
        session = AdaptSession(model, model.frozen_copy(), None, cfg)
        for _ in range(reps):
            session.jfa_step(item)
        session.optimizer_update()
        outcomes.append({k: t.data.copy() for k, t in model.adapter.items()})
    for k in outcomes[0]:
        # mean of two equal gradients is that gradient, bit for bit
        assert np.array_equal(outcomes[0][k], outcomes[1][k])


def test_window_counters_and_partial_flush():
    mc = ModelConfig()
    item = _sup_item((20, 4, 5, 6, 2), (9,))
    cfg = RunConfig(use_jtl=False, use_pcgrad=False, use_flashbacks=False,
                    accumulation_steps=2, batch_size=1)
    model = ModelState.init(mc, 1)
    model.set_trainable(base=False, adapter=True)
    session = AdaptSession(model, model.frozen_copy(), None, cfg)
    for i in range(5):
        session.jfa_step(item)
        if session.window_full:
            session.optimizer_update()
    session.optimizer_update()   # flush the trailing single-item window
    assert session.n_updates == 3
    assert session.n_sft_items == 5
    session.optimizer_update()   # empty window: no-op
    assert session.n_updates == 3


def test_zero_weight_flashbacks_do_not_occupy_window_slots():
    # At alpha=0 a flashback contributes nothing to either buffer, so it
    # must not count toward the window mean either -- otherwise replicated
    # no-op items would silently shrink every supervised update.
    mc = ModelConfig()
    seq = (20, 4, 5, 6, 2, 9)
    fb = TrainItem(kind="fb", task="t", group=0, query=None,
                   inputs=np.asarray(seq[:-1], dtype=np.int64),
                   rows=(2, len(seq) - 1))
    for alpha, counted in ((0.0, 0), (1.0, 1)):
        cfg = RunConfig(alpha=alpha, use_jtl=False, use_pcgrad=False,
                        accumulation_steps=2, batch_size=1)
        model = ModelState.init(mc, 3)
        model.set_trainable(base=False, adapter=True)
        session = AdaptSession(model, model.frozen_copy(), None, cfg)
        session.jfa_step(fb)
        assert session._window_items == counted
        assert session.n_div_items == 1
        assert not session.window_full
        assert bool(session._acc["div"]) == (alpha != 0.0)
    session.jfa_step(_sup_item((20, 4, 5), (9,)))
    assert session.window_full   # sup item always counts


def test_nonfinite_window_is_skipped_and_counted():
    mc = ModelConfig()
    cfg = RunConfig(use_jtl=False, use_pcgrad=False, use_flashbacks=False,
                    accumulation_steps=1, batch_size=1)
    model = ModelState.init(mc, 2)
    model.set_trainable(base=False, adapter=True)
    session = AdaptSession(model, model.frozen_copy(), None, cfg)
    session.jfa_step(_sup_item((20, 4, 5, 6, 2), (9,)))
    name = next(iter(session._acc["sft"]))
    session._acc["sft"][name][0, 0] = np.nan
    before = {k: t.data.copy() for k, t in model.adapter.items()}
    session.optimizer_update()
    assert session.n_skipped_nonfinite == 1
    assert session.n_updates == 0
    assert session._window_items == 0
    for k, t in model.adapter.items():
        assert np.array_equal(t.data, before[k])


def test_pcgrad_flag_is_inert_without_conflicting_stream():
    # With only supervised items the divergence buffer is all zero, the dot
    # product is zero, and surgery must be a bitwise no-op.
    mc = ModelConfig()
    item = _sup_item((20, 4, 5, 6, 2), (9,))
    results = []
    for use_pcgrad in (False, True):
        cfg = RunConfig(use_jtl=False, use_pcgrad=use_pcgrad,
                        use_flashbacks=False, accumulation_steps=1,
                        batch_size=1)
        model = ModelState.init(mc, 3)
        model.set_trainable(base=False, adapter=True)
        session = AdaptSession(model, model.frozen_copy(), None, cfg)
        for _ in range(3):
            session.jfa_step(item)
            session.optimizer_update()
        results.append({k: t.data.copy() for k, t in model.adapter.items()})
    for k in results[0]:
        assert np.array_equal(results[0][k], results[1][k])


def test_warmup_budget_exhaustion_raises_with_history():
    mc = ModelConfig()
    suite = make_suite(2, sizes=(4, 2, 2))
    old = [t for t in suite if t.spec.role == "old"]
    model = ModelState.init(mc, 0)
    cfg = RunConfig(warmup_max_epochs=1, warmup_threshold=1.0)
    with pytest.raises(WarmupError, match="stalled") as exc:
        warmup(model, old, cfg)
    assert len(exc.value.history) == 1
    assert set(exc.value.history[0]) >= {"epoch", "mean_loss",
                                         "mean_val_exact_match"}


def test_run_is_deterministic_and_reports_are_json_stable():
    mc = ModelConfig()
    suite = make_suite(0, sizes=(20, 5, 5))
    cfg = RunConfig(epochs=1, flashbacks_per_task=3)
    blobs = []
    for _ in range(2):
        rep, model, bank, fbs = run(cfg, mc, suite,
                                    warm_model=ModelState.init(mc, 5))
        blobs.append(json.dumps(rep, sort_keys=True))
    assert blobs[0] == blobs[1]
    rep = json.loads(blobs[0])
    assert rep["reference_probe"]["before"] == rep["reference_probe"]["after"]
    assert rep["routing"]["expected"] == rep["routing"]["touched"]
    assert rep["counters"]["n_div_items"] == 3 * 2   # 2 old tasks, 1 epoch
    assert rep["counters"]["n_sft_items"] == 20 * 2  # 2 new tasks
    assert rep["warmup"] is None                     # warm model was supplied
    assert {r["task"] for r in rep["after"]} == \
        {"modadd", "copy", "reverse", "modsub"}
    assert "old_drop" in rep["forgetting"]


def test_run_latent_updates_respect_routing():
    mc = ModelConfig()
    suite = make_suite(4, sizes=(12, 4, 4))
    cfg = RunConfig(epochs=1, flashbacks_per_task=2)
    rep, model, bank, _ = run(cfg, mc, suite, warm_model=ModelState.init(mc, 6))
    touched = set(rep["routing"]["touched"])
    assert touched   # something was retrieved and trained
    for task in bank.all_tasks():
        a = task.params[f"{target_names(mc)[0]}.A"].data
        moved = any(np.any(task.params[f"{n}.A"].data)
                    for n in target_names(mc))
        assert moved == (task.name in touched)


def test_run_single_epoch_first_window_flashbacks_dont_break_routing():
    # With one epoch, a flashback shuffled into the first accumulation
    # window sees the adapted model bitwise-equal to the frozen reference
    # (all increments start at zero), so its dual-KL gradient is exactly
    # zero and its retrieved tasks are never touched.  Those retrievals
    # must not be counted as expected routing.  Regression: this exact
    # seed used to raise "latent routing mismatch".
    mc = ModelConfig()
    suite = make_suite(0, sizes=(10, 3, 3))
    cfg = RunConfig(epochs=1, flashbacks_per_task=2)
    rep, _, _, _ = run(cfg, mc, suite, warm_model=ModelState.init(mc, 0))
    assert rep["routing"]["expected"] == rep["routing"]["touched"]
    assert rep["counters"]["n_div_items"] == 2 * 2
    assert rep["counters"]["n_updates"] > 0


def test_run_requires_both_roles():
    mc = ModelConfig()
    suite = make_suite(0, sizes=(4, 2, 2))
    only_old = [t for t in suite if t.spec.role == "old"]
    with pytest.raises(ValueError, match="old and new"):
        run(RunConfig(), mc, only_old, warm_model=ModelState.init(mc, 0))
