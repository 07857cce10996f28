import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikinghan import autodiff as ad
from spikinghan.autodiff import Tape, TapeMode, finite_difference_check
from spikinghan.config import LeakTarget, NeuronConfig, NeuronKind, ResetMode
from spikinghan.errors import ConfigError
from spikinghan.neurons import neuron_step, plif_time_constant, simulate, tau_param_for


def reference_step(v_prev, current, cfg, tau):
    """Straight-line integrate, fire and reset over plain arrays."""
    if cfg.kind is NeuronKind.IF:
        v = v_prev + current
    else:
        leak = cfg.v_th if cfg.leak_target is LeakTarget.THRESHOLD else 0.0
        v = v_prev + (current - (v_prev - leak)) * (1.0 / tau)
    spikes = (v - cfg.v_th >= 0).astype(np.float64)
    if cfg.reset_mode is ResetMode.SUBTRACT:
        v_new = np.where(spikes == 1, v - cfg.v_th, v)
    else:
        v_new = np.where(spikes == 1, cfg.v_reset, v)
    return v_new, spikes


CONFIGS = list(itertools.product(NeuronKind, ResetMode, LeakTarget))


@pytest.mark.parametrize("kind,reset,leak", CONFIGS)
def test_steps_match_straight_line_simulator(kind, reset, leak):
    rng = np.random.default_rng(CONFIGS.index((kind, reset, leak)))
    # 12 configurations x 84 sequences covers a thousand randomized runs
    for _ in range(84):
        v_th = float(rng.uniform(0.2, 2.0))
        cfg = NeuronConfig(
            kind=kind,
            reset_mode=reset,
            leak_target=leak,
            v_th=v_th,
            v_reset=float(rng.uniform(-1.0, v_th * 0.9)),
            tau_init=float(rng.uniform(1.1, 5.0)),
        )
        tape = Tape()
        if kind is NeuronKind.PLIF:
            p = float(rng.normal())
            tau_m = plif_time_constant(tape.leaf(np.array(p), name="tau_param"))
            tau_ref = 1.0 + np.logaddexp(0.0, p)
        else:
            tau_m = tau_ref = cfg.tau_init

        v_node = tape.constant(np.zeros((3, 4)))
        v_ref = np.zeros((3, 4))
        for _ in range(int(rng.integers(1, 13))):
            current = rng.normal(0.5, 1.0, size=(3, 4))
            v_node, spikes, _ = neuron_step(v_node, current, cfg, tau_m)
            v_ref, spikes_ref = reference_step(v_ref, current, cfg, tau_ref)
            np.testing.assert_array_equal(spikes.value, spikes_ref)
            np.testing.assert_array_equal(v_node.value, v_ref)


class TestHandSimulations:
    def test_if_spike_train(self):
        cfg = NeuronConfig(kind=NeuronKind.IF, time_steps=3)
        _, trace = simulate(Tape().constant(np.array([[0.6]])), cfg)
        np.testing.assert_array_equal(trace.spikes[:, 0, 0], [0, 1, 0])
        np.testing.assert_allclose(trace.membrane[:, 0, 0], [0.6, 0.2, 0.8])

    def test_if_five_steps(self):
        # 0.625 is exact in binary; 0.6 accumulates to 0.9999999999999999 at step 5
        cfg = NeuronConfig(kind=NeuronKind.IF, time_steps=5)
        rate, trace = simulate(Tape().constant(np.array([[0.625]])), cfg)
        np.testing.assert_array_equal(trace.spikes[:, 0, 0], [0, 1, 0, 1, 1])
        assert rate.value[0, 0] == pytest.approx(0.6)

    def test_no_input_no_spike(self):
        cfg = NeuronConfig(kind=NeuronKind.IF)
        v, spikes, _ = neuron_step(np.zeros(2), np.zeros(2), cfg)
        np.testing.assert_array_equal(spikes.value, [0, 0])
        np.testing.assert_array_equal(v.value, [0, 0])

    def test_lif_leaks_towards_threshold(self):
        cfg = NeuronConfig(kind=NeuronKind.LIF, tau_init=2.0)
        v, spikes, _ = neuron_step(np.zeros(1), np.zeros(1), cfg)
        assert v.value[0] == 0.5
        assert spikes.value[0] == 0

    def test_lif_leak_to_zero_stays_silent(self):
        cfg = NeuronConfig(kind=NeuronKind.LIF, leak_target=LeakTarget.ZERO, time_steps=64)
        rate, _ = simulate(Tape().constant(np.zeros((2, 2))), cfg)
        np.testing.assert_array_equal(rate.value, np.zeros((2, 2)))

    def test_lif_at_zero_current_eventually_reaches_threshold(self):
        # V_t = 1 - 2^-t until rounding lands exactly on V_th
        cfg = NeuronConfig(kind=NeuronKind.LIF, tau_init=2.0, time_steps=64)
        rate, trace = simulate(Tape().constant(np.zeros((1, 1))), cfg)
        assert rate.value[0, 0] > 0
        assert trace.spikes[:, 0, 0].sum() == 1

    def test_saturating_current_fires_every_step(self):
        cfg = NeuronConfig(kind=NeuronKind.IF, time_steps=7)
        rate, _ = simulate(Tape().constant(np.full((2, 3), 1.0)), cfg)
        np.testing.assert_array_equal(rate.value, np.ones((2, 3)))


class TestTraceInvariants:
    @given(
        st.sampled_from(CONFIGS),
        st.integers(1, 16),
        st.integers(0, 2**32 - 1),
    )
    def test_rates_are_multiples_of_one_over_t(self, config, time_steps, seed):
        kind, reset, leak = config
        cfg = NeuronConfig(kind=kind, reset_mode=reset, leak_target=leak, time_steps=time_steps)
        current = np.random.default_rng(seed).normal(0.5, 1.5, size=(4, 3))
        tau_m = plif_time_constant(Tape().leaf(np.array(0.3))) if kind is NeuronKind.PLIF else None
        tape = tau_m.tape if tau_m is not None else Tape()
        rate, trace = simulate(tape.constant(current), cfg, tau_m)

        assert set(np.unique(trace.spikes)) <= {0.0, 1.0}
        counts = trace.spikes.sum(axis=0)
        np.testing.assert_array_equal(rate.value, counts / time_steps)
        np.testing.assert_array_equal(trace.firing_rate, rate.value)
        assert trace.time_steps == time_steps
        assert 0.0 <= trace.sparsity <= 1.0

    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_subtract_reset_bookkeeping(self, time_steps, seed):
        cfg = NeuronConfig(kind=NeuronKind.IF, v_th=0.7, time_steps=time_steps)
        current = np.random.default_rng(seed).uniform(0.0, 2.0, size=(5, 2))
        _, trace = simulate(Tape().constant(current), cfg)
        fired = trace.spikes == 1
        np.testing.assert_array_equal(trace.membrane[fired], trace.membrane_pre[fired] - 0.7)
        np.testing.assert_array_equal(trace.membrane[~fired], trace.membrane_pre[~fired])

    @given(st.floats(0.0, 1.0), st.floats(0.2, 3.0), st.integers(1, 50))
    def test_if_rate_law(self, fraction, v_th, time_steps):
        c = fraction * v_th
        cfg = NeuronConfig(kind=NeuronKind.IF, v_th=v_th, time_steps=time_steps)
        rate, _ = simulate(Tape().constant(np.array([[c]])), cfg)
        assert abs(rate.value[0, 0] - c / v_th) <= 1.0 / time_steps + 1e-12


class TestPLIF:
    def test_initial_time_constant(self):
        tau = plif_time_constant(Tape().leaf(np.array(tau_param_for(2.0))))
        assert tau.value == pytest.approx(2.0, rel=1e-14)

    def test_tau_init_must_exceed_one(self):
        with pytest.raises(ConfigError):
            tau_param_for(1.0)

    @pytest.mark.parametrize("reset", list(ResetMode))
    def test_gradients_reach_the_time_constant(self, reset):
        cfg = NeuronConfig(kind=NeuronKind.PLIF, reset_mode=reset, v_reset=-0.2, time_steps=4)
        weights = np.linspace(0.5, 1.5, 6).reshape(2, 3)

        def f(tape, leaves):
            rate, _ = simulate(leaves["current"], cfg, plif_time_constant(leaves["p"]), retain_membrane=False)
            return ad.total(ad.mul(rate, tape.constant(weights)))

        params = {
            "current": np.random.default_rng(0).normal(0.8, 0.5, size=(2, 3)),
            "p": np.array(0.1),
        }
        assert finite_difference_check(f, params) < 1e-6

        tape = Tape(TapeMode.SMOOTH)
        p = tape.leaf(params["p"], name="p")
        rate, _ = simulate(tape.constant(params["current"]), cfg, plif_time_constant(p))
        assert tape.backward(ad.total(rate))["p"] != 0.0


class TestErrors:
    def test_lif_time_constant_must_exceed_one(self):
        cfg = NeuronConfig(kind=NeuronKind.LIF)
        with pytest.raises(ConfigError):
            neuron_step(np.zeros(1), np.ones(1), cfg, 1.0)

    def test_zero_time_steps(self):
        cfg = NeuronConfig.model_construct(time_steps=0)
        with pytest.raises(ConfigError):
            simulate(Tape().constant(np.zeros((1, 1))), cfg)

    def test_reset_must_sit_below_threshold(self):
        with pytest.raises(ValueError):
            NeuronConfig(reset_mode=ResetMode.TO_CONSTANT, v_reset=1.0, v_th=1.0)
