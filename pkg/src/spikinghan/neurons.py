"""
Spiking neuron dynamics: integrate, fire, reset.

IF:       V = V_prev + I
LIF/PLIF: V = V_prev + (1/tau_m) * (I - (V_prev - L)),  L = V_th or 0
Fire:     S = Heaviside(V - V_th)
Reset:    subtract     V = S * (V - V_th) + (1 - S) * V
          to_constant  V = S * V_reset + (1 - S) * V

PLIF learns tau_m through an unconstrained parameter: tau_m = 1 + softplus(p).
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from spikinghan import autodiff as ad
from spikinghan.autodiff import Node, Tape
from spikinghan.config import LeakTarget, NeuronConfig, NeuronKind, ResetMode
from spikinghan.errors import ConfigError

logger = logging.getLogger(__name__)

TimeConstant = Union[float, Node, None]


@dataclass(frozen=True)
class SpikeTrace:
    """
    Output of the spiking head over T steps.

    spikes and membrane are T x n x d_out; membrane holds post-reset
    potentials and membrane_pre the potentials the fire decision saw.
    """

    spikes: np.ndarray
    firing_rate: np.ndarray
    membrane: Optional[np.ndarray] = None
    membrane_pre: Optional[np.ndarray] = None

    @property
    def time_steps(self) -> int:
        return int(self.spikes.shape[0])

    @property
    def sparsity(self) -> float:
        """Fraction of zero entries in the spike tensor."""
        if self.spikes.size == 0:
            return 1.0
        return float(np.count_nonzero(self.spikes == 0) / self.spikes.size)


def tau_param_for(tau_init: float) -> float:
    """Inverse of tau = 1 + softplus(p), so that a fresh PLIF starts at tau_init."""
    if tau_init <= 1:
        raise ConfigError(f"tau_init must exceed 1, got {tau_init}")
    return math.log(math.expm1(tau_init - 1.0))


def plif_time_constant(tau_param: Node) -> Node:
    return ad.affine(ad.softplus(tau_param), 1.0, 1.0)


def neuron_step(
    v_prev: Union[Node, np.ndarray],
    current: Union[Node, np.ndarray],
    cfg: NeuronConfig,
    tau_m: TimeConstant = None,
    *,
    tape: Optional[Tape] = None,
) -> Tuple[Node, Node, Node]:
    """
    Advance a population of neurons by one time step.

    `tau_m` is a float for LIF, a node (so gradients reach it) for PLIF, and
    ignored for IF. Arrays are lifted onto `tape` as constants.

    Returns:
        (V after reset, spikes, V before reset)
    """
    if tape is None:
        if isinstance(v_prev, Node):
            tape = v_prev.tape
        elif isinstance(current, Node):
            tape = current.tape
        else:
            tape = Tape()
    v_prev = tape.lift(v_prev)
    current = tape.lift(current)

    # Integrate
    if cfg.kind is NeuronKind.IF:
        v = ad.add(v_prev, current)
    else:
        leak = cfg.v_th if cfg.leak_target is LeakTarget.THRESHOLD else 0.0
        drive = ad.sub(current, ad.affine(v_prev, 1.0, -leak))
        if isinstance(tau_m, Node):
            v = ad.add(v_prev, ad.mul(drive, ad.reciprocal(tau_m)))
        else:
            if tau_m is None:
                tau_m = cfg.tau_init
            if tau_m <= 1:
                raise ConfigError(f"tau_m must exceed 1 for {cfg.kind.value}, got {tau_m}")
            v = ad.add(v_prev, ad.scale(drive, 1.0 / tau_m))

    # Fire
    above = ad.affine(v, 1.0, -cfg.v_th)
    spikes = ad.heaviside_spike(above, cfg.alpha)

    # Reset
    gate = tape.constant(spikes.value) if cfg.detach_reset else spikes
    keep = ad.mul(ad.affine(gate, -1.0, 1.0), v)
    if cfg.reset_mode is ResetMode.SUBTRACT:
        v_new = ad.add(ad.mul(gate, above), keep)
    else:
        v_new = ad.add(ad.scale(gate, cfg.v_reset), keep)

    return v_new, spikes, v


def simulate(
    current: Node,
    cfg: NeuronConfig,
    tau_m: TimeConstant = None,
    *,
    retain_membrane: bool = True,
) -> Tuple[Node, SpikeTrace]:
    """
    Inject the same current for `cfg.time_steps` steps starting from V = 0.

    Returns the firing-rate node (mean spike over time) and the recorded trace.
    """
    if cfg.time_steps < 1:
        raise ConfigError(f"time_steps must be at least 1, got {cfg.time_steps}")
    tape = current.tape
    v = tape.constant(np.zeros(current.shape, dtype=current.value.dtype))

    spike_nodes: List[Node] = []
    post: List[np.ndarray] = []
    pre: List[np.ndarray] = []
    for _ in range(cfg.time_steps):
        v, spikes, v_pre = neuron_step(v, current, cfg, tau_m, tape=tape)
        spike_nodes.append(spikes)
        if retain_membrane:
            post.append(v.value)
            pre.append(v_pre.value)

    rate = ad.mean_of(spike_nodes)
    trace = SpikeTrace(
        spikes=np.stack([s.value for s in spike_nodes]),
        firing_rate=rate.value,
        membrane=np.stack(post) if retain_membrane else None,
        membrane_pre=np.stack(pre) if retain_membrane else None,
    )
    return rate, trace
