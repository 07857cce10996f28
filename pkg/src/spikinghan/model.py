"""
The SpikingHAN forward computation.

features --(shared W1, one layer per meta-path)--> h^Phi_1 .. h^Phi_P
         --(semantic attention W2, b, q)--------> beta, H
         --(H W3, dropout, spiking neurons)------> firing rates y_hat
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from spikinghan import autodiff as ad
from spikinghan.autodiff import Node, Tape, TapeMode
from spikinghan.config import Activation, ModelConfig, NeuronConfig, NeuronKind
from spikinghan.errors import ConfigError, NumericError, ShapeError
from spikinghan.hetgraph import MetaPathAdjacency
from spikinghan.neurons import SpikeTrace, plif_time_constant, simulate, tau_param_for

logger = logging.getLogger(__name__)

PARAM_ORDER: Tuple[str, ...] = ("W1", "W2", "b", "q", "W3", "tau_param")


# region Parameters
@dataclass(frozen=True)
class ModelParams:
    W1: np.ndarray
    W2: np.ndarray
    b: np.ndarray
    q: np.ndarray
    W3: np.ndarray
    tau_param: Optional[np.ndarray] = None

    def __post_init__(self):
        d_in, d_hd = self.W1.shape
        expected = {
            "W2": (d_hd, d_hd),
            "b": (d_hd,),
            "q": (d_hd,),
            "W3": (d_hd, self.W3.shape[1] if self.W3.ndim == 2 else -1),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"Parameter {name} has the wrong shape", shape, actual)
        if self.tau_param is not None and self.tau_param.shape != ():
            raise ShapeError("Parameter tau_param must be a scalar", (), self.tau_param.shape)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W3.shape[1]

    def tensors(self) -> Dict[str, np.ndarray]:
        """Parameters in declaration order; tau_param only when present."""
        return {
            name: getattr(self, name) for name in PARAM_ORDER if getattr(self, name) is not None
        }

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "ModelParams":
        missing = [n for n in PARAM_ORDER[:-1] if n not in tensors]
        if missing:
            raise ShapeError(f"Missing parameters {missing}")
        return cls(**{name: np.asarray(tensors[name], dtype=np.float64) for name in tensors})

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors({n: np.array(v, copy=True) for n, v in self.tensors().items()})

    def astype(self, dtype) -> "ModelParams":
        return replace(self, **{n: v.astype(dtype) for n, v in self.tensors().items()})

    def size(self) -> int:
        return int(sum(v.size for v in self.tensors().values()))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(d_in: int, d_out: int, cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """
    Initial parameters: W1, W2, W3 scaled-uniform in +-sqrt(6 / (fan_in + fan_out)),
    b and q uniform in +-0.01, PLIF tau_param set so that tau_m == tau_init.
    """
    d_hd = cfg.hidden_dim
    return ModelParams(
        W1=glorot_uniform(rng, d_in, d_hd),
        W2=glorot_uniform(rng, d_hd, d_hd),
        b=rng.uniform(-0.01, 0.01, size=d_hd),
        q=rng.uniform(-0.01, 0.01, size=d_hd),
        W3=glorot_uniform(rng, d_hd, d_out),
        tau_param=(
            np.array(tau_param_for(cfg.neuron.tau_init))
            if cfg.neuron.kind is NeuronKind.PLIF
            else None
        ),
    )


def parameter_count(d_in: int, d_hd: int, d_out: int, kind: NeuronKind) -> int:
    return d_in * d_hd + d_hd * d_hd + d_hd + d_hd + d_hd * d_out + (1 if kind is NeuronKind.PLIF else 0)


def bind(tape: Tape, params: ModelParams, *, requires_grad: bool = True) -> Dict[str, Node]:
    return {
        name: tape.leaf(value, name=name, requires_grad=requires_grad)
        for name, value in params.tensors().items()
    }


# endregion


# region Layers
@dataclass(frozen=True)
class ModelInputs:
    features: np.ndarray
    adjacencies: Tuple[MetaPathAdjacency, ...]
    metapath_names: Tuple[str, ...] = ()

    def __post_init__(self):
        n = self.features.shape[0]
        for adjacency in self.adjacencies:
            if adjacency.n != n:
                raise ShapeError(
                    f"Adjacency '{adjacency.name}' does not match the feature rows",
                    (adjacency.n, adjacency.n),
                    self.features.shape,
                )
        if not self.metapath_names:
            names = tuple(a.name or f"metapath_{k}" for k, a in enumerate(self.adjacencies))
            object.__setattr__(self, "metapath_names", names)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])


_ACTIVATIONS = {
    Activation.RELU: ad.relu,
    Activation.ELU: ad.elu,
}


def shared_graph_conv(
    features: Node,
    adjacencies: Sequence[MetaPathAdjacency],
    w1: Node,
    activation: Activation = Activation.RELU,
) -> List[Node]:
    """
    One graph-convolution layer per meta-path, all sharing W1.

    The projection features @ W1 is computed once and aggregated with each
    meta-path's normalised adjacency.
    """
    n = features.shape[0]
    for adjacency in adjacencies:
        if adjacency.n != n:
            raise ShapeError(f"Adjacency '{adjacency.name}' does not match the feature rows", (adjacency.n,), (n,))

    act = _ACTIVATIONS[Activation(activation)]
    projected = ad.linear(features, w1)
    return [act(ad.spmm(adjacency.normalized, projected)) for adjacency in adjacencies]


def semantic_attention(h_list: Sequence[Node], w2: Node, b: Node, q: Node) -> Tuple[Node, Node]:
    """
    Meta-path importance I_p = mean_i q . tanh(h_i W2 + b), beta = softmax(I),
    fused embedding H = sum_p beta_p h_p.
    """
    if not h_list:
        raise ConfigError("semantic attention needs at least one meta-path")

    importance = [ad.mean(ad.matvec(ad.tanh(ad.add_bias(ad.linear(h, w2), b)), q)) for h in h_list]
    beta = ad.softmax(ad.stack(importance))
    return beta, ad.weighted_sum(beta, h_list)


def spiking_head(
    embedding: Node,
    w3: Node,
    cfg: NeuronConfig,
    dropout_rate: float,
    training: bool,
    rng: Optional[np.random.Generator],
    tau_param: Optional[Node] = None,
) -> Tuple[Node, SpikeTrace]:
    """
    Drive the neurons with dropout(H W3), the same current at every step, and
    read out firing rates. Dropout is sampled once per call.
    """
    current = ad.dropout(ad.linear(embedding, w3), dropout_rate, training, rng)

    tau_m = None
    if cfg.kind is NeuronKind.PLIF:
        if tau_param is None:
            raise ConfigError("PLIF neurons need a tau_param")
        tau_m = plif_time_constant(tau_param)
    elif cfg.kind is NeuronKind.LIF:
        tau_m = cfg.tau_init

    return simulate(current, cfg, tau_m)


# endregion


# region Forward
@dataclass
class ForwardResult:
    y_hat: Node
    trace: SpikeTrace
    beta: Node
    fused: Node
    embeddings: List[Node]
    leaves: Dict[str, Node]
    tape: Tape = field(repr=False)

    @property
    def beta_values(self) -> np.ndarray:
        return self.beta.value


def model_forward(
    inputs: ModelInputs,
    params: ModelParams,
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    tape: Optional[Tape] = None,
    requires_grad: bool = True,
    dtype: type = np.float64,
) -> ForwardResult:
    """
    Shared graph convolution, semantic attention and the spiking head in one pass.

    In eval mode (training=False) the output depends only on the inputs and parameters.
    `dtype` only applies when no tape is passed in.
    """
    d_in, _, _ = params.dims
    if inputs.features.shape[1] != d_in:
        raise ShapeError("Feature width does not match W1", inputs.features.shape, params.W1.shape)
    if cfg.neuron.kind is NeuronKind.PLIF and params.tau_param is None:
        raise ConfigError("PLIF configuration but parameters carry no tau_param")

    if tape is None:
        tape = Tape(TapeMode.SPIKING, surrogate_chain_alpha=cfg.neuron.surrogate_chain_alpha, dtype=dtype)
    leaves = bind(tape, params, requires_grad=requires_grad)
    features = tape.constant(inputs.features)

    embeddings = shared_graph_conv(features, inputs.adjacencies, leaves["W1"], cfg.activation)
    beta, fused = semantic_attention(embeddings, leaves["W2"], leaves["b"], leaves["q"])
    rate, trace = spiking_head(
        fused,
        leaves["W3"],
        cfg.neuron,
        cfg.dropout_rate,
        training,
        rng,
        tau_param=leaves.get("tau_param"),
    )
    y_hat = ad.row_normalize(rate) if cfg.normalize_readout else rate

    if not np.all(np.isfinite(y_hat.value)):
        raise NumericError("Model output contains non-finite values")

    return ForwardResult(
        y_hat=y_hat,
        trace=trace,
        beta=beta,
        fused=fused,
        embeddings=embeddings,
        leaves=leaves,
        tape=tape,
    )


def predict_eval(
    inputs: ModelInputs, params: ModelParams, cfg: ModelConfig, *, dtype: type = np.float64
) -> ForwardResult:
    """Deterministic inference pass without gradient bookkeeping."""
    return model_forward(inputs, params, cfg, training=False, requires_grad=False, dtype=dtype)


# endregion
