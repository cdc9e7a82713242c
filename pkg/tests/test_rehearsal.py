import numpy as np
import pytest

from emgd.errors import EmptyMemoryError, InvalidInputError
from emgd.net import Batch, Network, add_head, backward, directional_edit_gradient
from emgd.rehearsal import (
    EditConfig,
    MemoryBuffer,
    edit_memory_emgd,
    edit_memory_gmed,
    editing_objective,
    insert,
    load_buffer_snapshot,
    memory_gradient,
    memory_loss,
    sample_memory,
    save_buffer_snapshot,
)

CHI2_99_DF5 = 15.086
CHI2_99_DF7 = 18.475


def class_batch(rng, n, dim=6, task=1, classes=4, label=None):
    labels = np.full(n, label, dtype=np.int64) if label is not None else rng.integers(0, classes, n)
    return Batch(rng.uniform(0, 1, (n, dim)), labels, task)


def make_net(seed=0, dim=6, heads=((1, 4), (2, 3))):
    net = Network((dim, 8, 5), seed=seed)
    for task, classes in heads:
        add_head(net, task, classes, seed=seed + task)
    return net


def filled_buffer(rng, capacity=3, tasks=(1, 2), per_task=6, dim=6):
    buf = MemoryBuffer(capacity)
    for t in tasks:
        batch = class_batch(rng, per_task, dim=dim, task=t, classes=3)
        insert(buf, batch, class_ids=10 * t + batch.labels, seed_or_rng=rng)
    return buf


class TestInsert:
    def test_under_capacity_keeps_everything(self):
        rng = np.random.default_rng(0)
        buf = MemoryBuffer(5)
        batch = class_batch(rng, 3, label=0)
        insert(buf, batch, class_ids=[7, 7, 7], seed_or_rng=1)
        assert buf.occupancy == 3
        assert buf.class_counts() == {7: 3}

    def test_capacity_never_exceeded(self):
        rng = np.random.default_rng(1)
        buf = MemoryBuffer(4)
        for _ in range(20):
            batch = class_batch(rng, 8, classes=3)
            insert(buf, batch, class_ids=batch.labels, seed_or_rng=rng)
        assert all(n <= 4 for n in buf.class_counts().values())
        assert buf.occupancy == sum(buf.class_counts().values())

    def test_inserting_one_class_never_evicts_another(self):
        rng = np.random.default_rng(2)
        buf = MemoryBuffer(2)
        b_batch = class_batch(rng, 2, label=1)
        insert(buf, b_batch, class_ids=[5, 5], seed_or_rng=3)
        before = [s.x.copy() for s in buf.slots if s.class_id == 5]
        for _ in range(50):
            a_batch = class_batch(rng, 4, label=0)
            insert(buf, a_batch, class_ids=[9, 9, 9, 9], seed_or_rng=rng)
        after = [s.x for s in buf.slots if s.class_id == 5]
        assert len(after) == 2
        for x, y in zip(before, after):
            np.testing.assert_array_equal(x, y)

    def test_reservoir_inclusion_is_uniform(self):
        # capacity 1, stream 8 samples: survivor index should be uniform
        n, trials = 8, 10000
        counts = np.zeros(n)
        base = np.random.default_rng(99)
        inputs = base.uniform(0, 1, (n, 4))
        for trial in range(trials):
            buf = MemoryBuffer(1)
            batch = Batch(inputs, np.zeros(n, dtype=np.int64), 1)
            insert(buf, batch, class_ids=np.zeros(n), seed_or_rng=trial)
            survivor = buf.slots[0].x
            counts[int(np.argmax((inputs == survivor).all(axis=1)))] += 1
        expected = trials / n
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < CHI2_99_DF7


class TestSampleMemory:
    def test_empty_buffer_raises(self):
        with pytest.raises(EmptyMemoryError):
            sample_memory(MemoryBuffer(2), 4, 0)

    def test_single_slot(self):
        rng = np.random.default_rng(4)
        buf = MemoryBuffer(1)
        batch = class_batch(rng, 1, label=2)
        insert(buf, batch, class_ids=[3], seed_or_rng=0)
        mem = sample_memory(buf, 1, 5)
        np.testing.assert_array_equal(mem.inputs[0], batch.inputs[0])
        assert mem.task_ids[0] == 1

    def test_full_draw_is_exact_multiset(self):
        rng = np.random.default_rng(5)
        buf = filled_buffer(rng)
        mem = sample_memory(buf, buf.occupancy, 7)
        assert sorted(mem.slot_indices.tolist()) == list(range(buf.occupancy))

    def test_oversized_draw_uses_replacement(self):
        rng = np.random.default_rng(6)
        buf = MemoryBuffer(1)
        insert(buf, class_batch(rng, 1, label=0), class_ids=[0], seed_or_rng=0)
        mem = sample_memory(buf, 5, 8)
        assert mem.size == 5

    def test_draw_frequency_uniform(self):
        rng = np.random.default_rng(7)
        buf = filled_buffer(rng, capacity=3, per_task=3)  # 6 slots
        counts = np.zeros(buf.occupancy)
        draws = np.random.default_rng(123)
        for _ in range(10000):
            mem = sample_memory(buf, 1, draws)
            counts[int(mem.slot_indices[0])] += 1
        expected = 10000 / buf.occupancy
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < CHI2_99_DF5


class TestMemoryGradient:
    def test_single_task_matches_backward(self):
        rng = np.random.default_rng(8)
        net = make_net()
        buf = filled_buffer(rng, tasks=(1,), per_task=4)
        mem = sample_memory(buf, buf.occupancy, 1)
        backbone, loss, heads = memory_gradient(net, mem)
        rep = backward(net, Batch(mem.inputs, mem.labels, 1))
        np.testing.assert_allclose(backbone, rep.backbone_grad, atol=1e-14)
        assert loss == pytest.approx(rep.loss, abs=1e-14)
        np.testing.assert_allclose(heads[1], rep.head_grad, atol=1e-14)

    def test_mixed_batch_weights_by_group_size(self):
        rng = np.random.default_rng(9)
        net = make_net()
        buf = filled_buffer(rng, tasks=(1, 2), per_task=3)
        mem = sample_memory(buf, buf.occupancy, 2)
        backbone, loss, heads = memory_gradient(net, mem)
        total = np.zeros_like(backbone)
        check_loss = 0.0
        for t in (1, 2):
            mask = mem.task_ids == t
            if not mask.any():
                continue
            rep = backward(net, Batch(mem.inputs[mask], mem.labels[mask], t))
            w = mask.sum() / mem.size
            total += w * rep.backbone_grad
            check_loss += w * rep.loss
            np.testing.assert_allclose(heads[t], w * rep.head_grad, atol=1e-14)
        np.testing.assert_allclose(backbone, total, atol=1e-14)
        assert loss == pytest.approx(check_loss, abs=1e-14)
        assert memory_loss(net, mem.inputs, mem) == pytest.approx(loss, abs=1e-14)


def snapshot(buf, net):
    slots = [(s.x.copy(), s.label, s.task_id, s.class_id) for s in buf.slots]
    return slots, net.flatten_backbone().copy(), {
        t: net.flatten_head(t).copy() for t in net.heads
    }


class TestEditEmgd:
    def test_aligned_direction_changes_nothing(self):
        rng = np.random.default_rng(10)
        net = make_net()
        buf = filled_buffer(rng, tasks=(1,), per_task=3)
        mem = sample_memory(buf, buf.occupancy, 3)
        g, _, _ = memory_gradient(net, mem)
        before = [s.x.copy() for s in buf.slots]
        edit_memory_emgd(buf, net, mem, -g, EditConfig())
        for x, s in zip(before, buf.slots):
            np.testing.assert_array_equal(x, s.x)

    def test_zero_eta_is_bit_exact_noop(self):
        rng = np.random.default_rng(11)
        net = make_net()
        buf = filled_buffer(rng)
        mem = sample_memory(buf, 4, 4)
        before = [s.x.copy() for s in buf.slots]
        edit_memory_emgd(buf, net, mem, rng.normal(size=net.backbone_dim), EditConfig(eta_edit=0.0))
        for x, s in zip(before, buf.slots):
            np.testing.assert_array_equal(x, s.x)

    def test_objective_does_not_increase(self):
        rng = np.random.default_rng(12)
        hits, trials = 0, 40
        for trial in range(trials):
            net = make_net(seed=trial)
            buf = filled_buffer(rng, capacity=2, per_task=4)
            mem = sample_memory(buf, 4, trial)
            other = class_batch(rng, 4, task=1, classes=4)
            d = -backward(net, other).backbone_grad
            before = editing_objective(net, mem.inputs, mem, d)
            edit_memory_emgd(buf, net, mem, d, EditConfig(eta_edit=1e-3, clamp=False))
            after = editing_objective(net, mem.inputs, mem, d)
            if after <= before + 1e-6:
                hits += 1
        assert hits >= 0.95 * trials

    def test_clamp_pins_to_unit_interval(self):
        rng = np.random.default_rng(13)
        net = make_net()
        buf = MemoryBuffer(2)
        batch = Batch(np.zeros((2, 6)), [0, 1], 1)  # already at the boundary
        insert(buf, batch, class_ids=[0, 1], seed_or_rng=0)
        mem = sample_memory(buf, 2, 1)
        edit_memory_emgd(buf, net, mem, rng.normal(size=net.backbone_dim) * 10,
                         EditConfig(eta_edit=1.0))
        for s in buf.slots:
            assert s.x.min() >= 0.0 and s.x.max() <= 1.0

    def test_edits_touch_only_inputs(self):
        rng = np.random.default_rng(14)
        net = make_net()
        buf = filled_buffer(rng)
        mem = sample_memory(buf, 4, 2)
        slots_before, backbone_before, heads_before = snapshot(buf, net)
        edit_memory_emgd(buf, net, mem, rng.normal(size=net.backbone_dim), EditConfig())
        np.testing.assert_array_equal(net.flatten_backbone(), backbone_before)
        for t, flat in heads_before.items():
            np.testing.assert_array_equal(net.flatten_head(t), flat)
        for (x0, label, task, cls), s in zip(slots_before, buf.slots):
            assert (s.label, s.task_id, s.class_id) == (label, task, cls)


class TestEditGmed:
    def test_zero_direction_zero_edit(self):
        rng = np.random.default_rng(15)
        net = make_net()
        buf = filled_buffer(rng)
        mem = sample_memory(buf, 4, 3)
        before = [s.x.copy() for s in buf.slots]
        edit_memory_gmed(buf, net, mem, np.zeros(net.backbone_dim), EditConfig())
        for x, s in zip(before, buf.slots):
            np.testing.assert_array_equal(x, s.x)

    def test_matches_scalar_finite_difference(self):
        # oracle: central difference of (loss(x,theta) - loss(x,theta'))^2
        rng = np.random.default_rng(16)
        net = make_net()
        buf = filled_buffer(rng, tasks=(1,), capacity=2, per_task=2)
        mem = sample_memory(buf, 2, 4)
        d = -backward(net, class_batch(rng, 3, task=1, classes=4)).backbone_grad
        eta = 0.05
        theta = net.flatten_backbone().copy()
        theta_ahead = theta + eta * d

        def squared_diff(inputs):
            batch = Batch(inputs, mem.labels, 1)
            net.set_backbone_flat(theta)
            from emgd.net import forward

            _, l_now = forward(net, batch)
            net.set_backbone_flat(theta_ahead)
            _, l_ahead = forward(net, batch)
            net.set_backbone_flat(theta)
            return (l_now - l_ahead) ** 2

        x0 = mem.inputs.copy()
        edit_memory_gmed(buf, net, mem, d, EditConfig(eta_edit=eta, clamp=False))
        applied = (x0 - mem.inputs) / eta  # recovered gradient estimate
        h = 1e-6
        for _ in range(10):
            i = int(rng.integers(x0.shape[0]))
            j = int(rng.integers(x0.shape[1]))
            xp = x0.copy()
            xp[i, j] += h
            up = squared_diff(xp)
            xp[i, j] -= 2 * h
            down = squared_diff(xp)
            fd = (up - down) / (2 * h)
            assert applied[i, j] == pytest.approx(fd, rel=1e-3, abs=1e-8)

    def test_clamp_behavior_matches_emgd_editing(self):
        rng = np.random.default_rng(17)
        net = make_net()
        buf = MemoryBuffer(2)
        insert(buf, Batch(np.zeros((2, 6)), [0, 1], 1), class_ids=[0, 1], seed_or_rng=0)
        mem = sample_memory(buf, 2, 1)
        edit_memory_gmed(buf, net, mem, rng.normal(size=net.backbone_dim) * 10,
                         EditConfig(eta_edit=1.0))
        for s in buf.slots:
            assert s.x.min() >= 0.0 and s.x.max() <= 1.0

    def test_restores_parameters(self):
        rng = np.random.default_rng(18)
        net = make_net()
        buf = filled_buffer(rng)
        mem = sample_memory(buf, 3, 9)
        before = net.flatten_backbone().copy()
        edit_memory_gmed(buf, net, mem, rng.normal(size=net.backbone_dim), EditConfig())
        np.testing.assert_array_equal(net.flatten_backbone(), before)


class TestQuadraticEditingOracle:
    def test_descends_to_the_analytic_minimizer(self):
        # loss(theta, x) = (theta x)^2 / 2: iterating the editing rule on
        # ||g(x) - d||^2 converges to theta x^2 = -d, and the directional
        # core reproduces the analytic gradient trajectory step for step
        theta, d = 1.5, -2.0
        x_analytic = x_core = 0.5
        target = np.sqrt(-d / theta)
        for _ in range(200):
            x_analytic -= 0.02 * 4 * theta * x_analytic * (theta * x_analytic**2 + d)
            v = np.array([-theta * x_core**2 - d])
            step = directional_edit_gradient(
                lambda th: th**2 * x_core, np.array([theta]), v, eps=1e-5
            )
            if step is None:  # converged: g(x) already matches d
                continue
            x_core -= 0.02 * float(step[0])
        assert x_analytic == pytest.approx(target, abs=1e-6)
        assert x_core == pytest.approx(x_analytic, abs=1e-6)


class TestSnapshot:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(19)
        buf = filled_buffer(rng)
        path = tmp_path / "buffer.bin"
        save_buffer_snapshot(buf, path)
        back = load_buffer_snapshot(path)
        assert back.occupancy == buf.occupancy
        assert back.capacity_per_class == buf.capacity_per_class
        assert back.seen_counts == buf.seen_counts
        for a, b in zip(buf.slots, back.slots):
            np.testing.assert_array_equal(a.x, b.x)
            assert (a.label, a.task_id, a.class_id) == (b.label, b.task_id, b.class_id)

    def test_rejects_other_blobs(self, tmp_path):
        from emgd.net import write_blob

        path = tmp_path / "other.bin"
        write_blob(path, {"kind": "something-else"}, np.zeros(3))
        with pytest.raises(InvalidInputError):
            load_buffer_snapshot(path)


class TestEditConfig:
    def test_rejects_oversized_step(self):
        with pytest.raises(InvalidInputError):
            EditConfig(eta_edit=1.5)

    def test_rejects_bad_eps(self):
        with pytest.raises(InvalidInputError):
            EditConfig(fd_eps=0.0)
