"""Bank invariants: key geometry, retrieval ranking, mixing weights."""

import numpy as np
import pytest

from flashlab import latent_bank as lb
from flashlab.autodiff import Tape, Tensor, reduce_sum

SHAPES = {"w1": (6, 4), "w2": (4, 6)}


def _bank(groups=3, keys_per_group=5, key_dim=8, top_k=2, seed=0, **kw):
    cfg = lb.BankConfig(groups=groups, keys_per_group=keys_per_group,
                        top_k=top_k, key_dim=key_dim, rank=2, seed=seed, **kw)
    return lb.init_bank(cfg, SHAPES)


def _hand_task(group, index, key_dim=4, value=1.0):
    key = np.zeros(key_dim)
    key[index % key_dim] = 1.0
    params = {"w.A": Tensor(np.full((2, 3), value)),
              "w.B": Tensor(np.full((3, 2), value))}
    return lb.LatentTask(group, index, key, params)


def test_config_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        lb.BankConfig(keys_per_group=9, key_dim=8)
    with pytest.raises(ValueError, match="top_k"):
        lb.BankConfig(top_k=13, keys_per_group=12)
    with pytest.raises(ValueError, match="degenerate"):
        lb.BankConfig(groups=0)


def test_keys_unit_norm_and_group_orthogonal():
    bank = _bank()
    for g in range(3):
        keys = bank.group_keys(g)
        norms = np.linalg.norm(keys, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-10)
        gram = keys @ keys.T
        off = gram - np.diag(np.diag(gram))
        assert np.abs(off).max() < 1e-8


def test_bank_init_deterministic():
    a, b = _bank(seed=7), _bank(seed=7)
    for (n0, a0), (n1, a1) in zip(a.to_arrays(), b.to_arrays()):
        assert n0 == n1 and np.array_equal(a0, a1)
    c = _bank(seed=8)
    assert not np.array_equal(a.group_keys(0), c.group_keys(0))


def test_fresh_bank_increments_are_zero():
    bank = _bank()
    q = bank.tasks[0][0].key  # unit vector, retrieval is legal
    mix = bank.mix_increments(bank.retrieve(q, 0))
    for target, shape in SHAPES.items():
        assert mix[target].shape == shape
        assert np.array_equal(mix[target].data, np.zeros(shape))


def test_retrieve_matches_brute_force():
    bank = _bank(top_k=3)
    rng = np.random.default_rng(42)
    for _ in range(100):
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        g = int(rng.integers(0, 3))
        got = [(t.index, s) for t, s in bank.retrieve(q, g)]
        sims = bank.group_keys(g) @ q
        want = sorted(range(5), key=lambda i: (-sims[i], i))[:3]
        assert [i for i, _ in got] == want
        for i, s in got:
            assert s == pytest.approx(float(sims[i]), abs=1e-12)


def test_retrieve_tie_break_on_lower_index():
    # Standard-basis keys and a query orthogonal to all of them: every
    # similarity is exactly 0.0, so ranking falls back to key index.
    tasks = [[_hand_task(0, i) for i in range(3)]]
    cfg = lb.BankConfig(groups=1, keys_per_group=3, top_k=2, key_dim=4, rank=2)
    bank = lb.LatentBank(cfg, tasks)
    q = np.array([0.0, 0.0, 0.0, 1.0])
    got = bank.retrieve(q, 0)
    assert [t.index for t, _ in got] == [0, 1]
    assert [s for _, s in got] == [0.0, 0.0]


def test_retrieve_validation():
    bank = _bank()
    unit = np.zeros(8)
    unit[0] = 1.0
    with pytest.raises(ValueError, match="unit"):
        bank.retrieve(unit * 2, 0)
    with pytest.raises(ValueError, match="shape"):
        bank.retrieve(np.ones(5), 0)
    with pytest.raises(ValueError, match="group"):
        bank.retrieve(unit, 9)
    with pytest.raises(ValueError, match="k"):
        bank.retrieve(unit, 0, k=6)
    with pytest.raises(ValueError, match="finite"):
        bank.retrieve(np.full(8, np.nan), 0)


def test_global_retrieval_pools_all_groups():
    bank = _bank(global_retrieval=True, top_k=4)
    q = bank.tasks[2][1].key
    got = bank.retrieve(q, 0)  # group argument ignored in global mode
    assert (got[0][0].group, got[0][0].index) == (2, 1)
    assert got[0][1] == pytest.approx(1.0, abs=1e-10)


def test_mix_weights_worked_example():
    t1, t2 = _hand_task(0, 0, value=1.0), _hand_task(0, 1, value=2.0)
    cfg = lb.BankConfig(groups=1, keys_per_group=2, top_k=2, key_dim=4, rank=2)
    bank = lb.LatentBank(cfg, [[t1, t2]])
    mix = bank.mix_increments([(t1, 0.6), (t2, 0.2)])
    d1 = t1.params["w.B"].data @ t1.params["w.A"].data
    d2 = t2.params["w.B"].data @ t2.params["w.A"].data
    # similarities (0.6, 0.2) -> weights (0.75, 0.25)
    np.testing.assert_allclose(mix["w"].data, 0.75 * d1 + 0.25 * d2, rtol=1e-15)


def test_mix_equal_similarities_is_plain_average():
    t1, t2 = _hand_task(0, 0, value=1.0), _hand_task(0, 1, value=3.0)
    bank = lb.LatentBank(
        lb.BankConfig(groups=1, keys_per_group=2, top_k=2, key_dim=4, rank=2),
        [[t1, t2]])
    mix = bank.mix_increments([(t1, 0.4), (t2, 0.4)])
    d1 = t1.params["w.B"].data @ t1.params["w.A"].data
    d2 = t2.params["w.B"].data @ t2.params["w.A"].data
    np.testing.assert_allclose(mix["w"].data, (d1 + d2) / 2, rtol=1e-15)


def test_mix_single_task_is_bitwise_its_increment():
    t1 = _hand_task(0, 0, value=0.7)
    bank = lb.LatentBank(
        lb.BankConfig(groups=1, keys_per_group=1, top_k=1, key_dim=4, rank=2),
        [[t1]])
    mix = bank.mix_increments([(t1, 0.9)])
    delta = t1.params["w.B"].data @ t1.params["w.A"].data
    assert np.array_equal(mix["w"].data, delta)


def test_mix_clamps_negative_and_falls_back_to_uniform():
    t1, t2 = _hand_task(0, 0, value=1.0), _hand_task(0, 1, value=2.0)
    bank = lb.LatentBank(
        lb.BankConfig(groups=1, keys_per_group=2, top_k=2, key_dim=4, rank=2),
        [[t1, t2]])
    d1 = t1.params["w.B"].data @ t1.params["w.A"].data
    d2 = t2.params["w.B"].data @ t2.params["w.A"].data
    # One negative similarity: its weight clamps to zero and the task
    # drops out of the graph entirely -- no value, no gradient.
    bank.set_trainable(True)
    with Tape() as tape:
        mix = bank.mix_increments([(t1, 0.5), (t2, -0.3)])
        tape.backward(reduce_sum(mix["w"]))
    np.testing.assert_allclose(mix["w"].data, d1, rtol=1e-15)
    assert t1.params["w.B"].grad is not None
    assert t2.params["w.B"].grad is None and t2.params["w.A"].grad is None
    assert bank.fallback_count == 0
    assert [(t.name, w) for t, w in bank.mix_weights([(t1, 0.5), (t2, -0.3)])] \
        == [("group0.task0", 1.0)]
    # All negative: uniform fallback, counter bumps.
    mix = bank.mix_increments([(t1, -0.1), (t2, -0.2)])
    np.testing.assert_allclose(mix["w"].data, (d1 + d2) / 2, rtol=1e-15)
    assert bank.fallback_count == 1
    with pytest.raises(ValueError, match="empty"):
        bank.mix_increments([])


def test_mix_is_order_invariant_bitwise():
    t1, t2, t3 = (_hand_task(0, i, value=v) for i, v in ((0, 1.0), (1, 2.0), (2, 0.5)))
    bank = lb.LatentBank(
        lb.BankConfig(groups=1, keys_per_group=3, top_k=3, key_dim=4, rank=2),
        [[t1, t2, t3]])
    fwd = bank.mix_increments([(t1, 0.5), (t2, 0.3), (t3, 0.1)])
    rev = bank.mix_increments([(t3, 0.1), (t2, 0.3), (t1, 0.5)])
    assert np.array_equal(fwd["w"].data, rev["w"].data)


def test_mix_gradients_reach_only_retrieved_tasks():
    bank = _bank()
    bank.set_trainable(True)
    rng = np.random.default_rng(0)
    for _, t in bank.latent_params():  # move A off zero so B also gets signal
        t.data[:] = rng.normal(0, 0.1, t.shape)
    # query overlapping two keys -> both similarities solidly positive
    q = bank.tasks[0][0].key + bank.tasks[0][1].key
    q = q / np.linalg.norm(q)
    retrieved = bank.retrieve(q, 0)
    with Tape() as tape:
        mix = bank.mix_increments(retrieved)
        tape.backward(reduce_sum(mix["w1"]))
    touched = {(t.group, t.index) for t, _ in retrieved}
    assert len(touched) == 2
    for task in bank.all_tasks():
        a_grad = task.params["w1.A"].grad
        b_grad = task.params["w1.B"].grad
        if (task.group, task.index) in touched:
            assert np.abs(a_grad).max() > 0 and np.abs(b_grad).max() > 0
        else:
            assert a_grad is None and b_grad is None


def test_encoder_properties():
    enc = lb.PromptEncoder(vocab_size=10, dim=6, seed=3)
    v1 = enc.encode([1, 2, 3])
    assert np.linalg.norm(v1) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(v1, enc.encode([3, 1, 2]))  # order-invariant
    row = enc.table[4] / np.linalg.norm(enc.table[4])
    np.testing.assert_allclose(enc.encode([4]), row, atol=1e-15)
    assert np.array_equal(enc.encode([5]), lb.PromptEncoder(10, 6, 3).encode([5]))
    with pytest.raises(ValueError, match="empty"):
        enc.encode([])
    with pytest.raises(ValueError, match="range"):
        enc.encode([10])


def test_assign_groups_uniform_and_deterministic():
    n, groups = 4800, 16
    a = lb.assign_groups(n, groups, seed=5)
    assert np.array_equal(a, lb.assign_groups(n, groups, seed=5))
    assert a.min() >= 0 and a.max() < groups
    counts = np.bincount(a, minlength=groups)
    expected = n / groups
    sigma = np.sqrt(n * (1 / groups) * (1 - 1 / groups))
    assert np.all(np.abs(counts - expected) < 3 * sigma + 1)
