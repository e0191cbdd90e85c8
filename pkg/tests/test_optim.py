import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvseg import optim as O
from tvseg.errors import ConfigError, TrainingError
from tvseg.tensor import ConvKernel

# lr used for the x**2 sanity run; the library default (1e-3) is tuned for networks
QUADRATIC_LR = {"SGD": 0.1, "ADAM": 0.015, "Adagrad": 0.5, "Adadelta": 5.0}


def run(spec, x0, grads):
    state = O.OptimizerState()
    params = {"x": np.array(x0, dtype=float)}
    for g in grads:
        params, state = O.step(spec, state, params, {"x": np.array(g, dtype=float)})
    return params["x"], state


def adam_scalar(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


class TestStep:
    def test_sgd_definition(self):
        x, state = run(O.OptimizerSpec(kind="SGD", lr=0.1), 1.0, [0.5])
        assert x == pytest.approx(0.95, abs=1e-15) and state.step == 1

    @pytest.mark.parametrize("g", [1e-3, 0.5, -2.0, 1e4])
    def test_adam_first_step(self, g):
        x, _ = run(O.OptimizerSpec(kind="ADAM", lr=0.01), 0.0, [g])
        assert x == pytest.approx(-0.01 * math.copysign(1, g), abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=12))
    def test_adam_matches_scalar_reference(self, gs):
        x, _ = run(O.OptimizerSpec(kind="ADAM", lr=0.02), 0.3, gs)
        assert float(x) == pytest.approx(adam_scalar(gs, 0.02, x=0.3), abs=1e-12)

    def test_adagrad_recurrence(self):
        spec = O.OptimizerSpec(kind="Adagrad", lr=1.0)
        x1, _ = run(spec, 0.0, [1.0])
        x2, _ = run(spec, 0.0, [1.0, 1.0])
        assert -x1 == pytest.approx(1.0, abs=1e-7)
        assert -(x2 - x1) == pytest.approx(1 / math.sqrt(2), abs=1e-7)

    def test_adadelta_first_step(self):
        rho, eps = 0.95, 1e-6
        x, _ = run(O.OptimizerSpec(kind="Adadelta", lr=1.0), 0.0, [2.0])
        expected = -math.sqrt(eps) / math.sqrt((1 - rho) * 4 + eps) * 2.0
        assert x == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kind", O.KINDS)
    def test_deterministic(self, kind):
        rng = np.random.default_rng(0)
        params = {"a": ConvKernel(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))}
        grads = {"a": ConvKernel(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))}
        spec = O.OptimizerSpec(kind=kind)
        p1, s1 = O.step(spec, O.OptimizerState(), params, grads)
        p2, s2 = O.step(spec, O.OptimizerState(), params, grads)
        assert np.array_equal(p1["a"].weights, p2["a"].weights) and np.array_equal(p1["a"].bias, p2["a"].bias)
        assert s1.slots.keys() == s2.slots.keys()
        assert all(np.array_equal(s1.slots[k], s2.slots[k]) for k in s1.slots)
        assert all(s1.slots[k].shape in {(2, 1, 3, 3), (2,)} for k in s1.slots)

    def test_inputs_not_mutated(self):
        params = {"x": np.array([1.0, 2.0])}
        O.step(O.OptimizerSpec(kind="SGD", lr=1.0), O.OptimizerState(), params, {"x": np.array([1.0, 1.0])})
        np.testing.assert_array_equal(params["x"], [1.0, 2.0])

    def test_non_finite_gradient_names_layer(self):
        params = {"enc0.conv1": ConvKernel(np.zeros((1, 1, 3, 3)), np.zeros(1))}
        grads = {"enc0.conv1": ConvKernel(np.full((1, 1, 3, 3), np.nan), np.zeros(1))}
        with pytest.raises(TrainingError, match="enc0.conv1"):
            O.step(O.OptimizerSpec(), O.OptimizerState(), params, grads)

    def test_structure_mismatch(self):
        with pytest.raises(ConfigError):
            O.step(O.OptimizerSpec(), O.OptimizerState(), {"a": np.zeros(2)}, {"b": np.zeros(2)})

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            O.OptimizerSpec(kind="RMSProp")
        with pytest.raises(ConfigError):
            O.OptimizerSpec(lr=0.0)
        with pytest.raises(ConfigError):
            O.OptimizerSpec(beta1=1.0)


@pytest.mark.parametrize("kind", O.KINDS)
def test_quadratic_sanity(kind):
    spec = O.OptimizerSpec(kind=kind, lr=QUADRATIC_LR[kind])
    state, params = O.OptimizerState(), {"x": np.array(1.0)}
    path = [1.0]
    for _ in range(100):
        params, state = O.step(spec, state, params, {"x": 2 * params["x"]})
        path.append(float(params["x"]))
    f = np.square(path)
    assert np.all(np.diff(f) < 0)
    assert abs(path[-1]) < 0.1


def test_adam_default_lr_descends_on_quadratic():
    spec = O.OptimizerSpec(kind="ADAM")
    state, params = O.OptimizerState(), {"x": np.array(1.0)}
    path = [1.0]
    for _ in range(100):
        params, state = O.step(spec, state, params, {"x": 2 * params["x"]})
        path.append(float(params["x"]))
    assert np.all(np.diff(path) < 0)
    assert path[-1] == pytest.approx(0.9, abs=0.01)


class TestSchedule:
    def drive(self, losses, **kw):
        s = O.ScheduleState(lr=1.0, **kw)
        actions = []
        for v in losses:
            s, a = O.end_of_epoch(s, v)
            actions.append(a)
        return s, actions

    def test_strictly_decreasing(self):
        s, actions = self.drive([1.0 / (i + 1) for i in range(30)])
        assert set(actions) == {O.CONTINUE} and s.stale == 0 and s.since_decay == 0 and s.lr == 1.0

    def test_decay_at_fifth_stale_epoch(self):
        _, actions = self.drive([1.0] + [1.0] * 5)
        assert actions == [O.CONTINUE] * 5 + [O.DECAY_LR]

    def test_stop_at_tenth_stale_epoch(self):
        s, actions = self.drive([1.0] + [1.0] * 10)
        assert actions[5] == O.DECAY_LR and actions[10] == O.STOP
        assert actions.count(O.DECAY_LR) == 1 and s.lr == 0.5 and s.stale == 10

    def test_improvement_within_tolerance_is_stale(self):
        _, actions = self.drive([1.0] + [1.0 - 5e-7] * 5)
        assert actions[-1] == O.DECAY_LR

    def test_improvement_resets(self):
        s, actions = self.drive([1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6])
        assert O.DECAY_LR not in actions and s.stale == 2 and s.best == 0.5

    def test_non_finite(self):
        with pytest.raises(ValueError):
            O.end_of_epoch(O.ScheduleState(lr=1.0), float("nan"))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from([1.0, 0.9, 0.8, 1.1, 0.5, 2.0]), max_size=60))
    def test_protocol_invariants(self, losses):
        s = O.ScheduleState(lr=1.0)
        best, stale, decays, lrs = math.inf, 0, [], [1.0]
        for epoch, v in enumerate(losses):
            s, a = O.end_of_epoch(s, v)
            stale = 0 if v < best - 1e-6 else stale + 1
            best = min(best, v) if stale == 0 else best
            lrs.append(s.lr)
            if a == O.STOP:
                assert stale >= 10
                break
            if a == O.DECAY_LR:
                assert not decays or epoch - decays[-1] >= 5
                decays.append(epoch)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
