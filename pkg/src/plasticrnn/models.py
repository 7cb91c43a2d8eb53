"""Plastic network assembly: plastic linear encoder, plastic recurrent
backbone (vanilla RNN or LSTM), and a plastic linear readout whose output
splits into (eta_tilde, prediction, auxiliary) coordinates.

All trial state lives on one tape per trial batch. ``reset_trial`` binds the
outer-loop parameters as fresh leaves and zeroes every plastic tensor and
hidden state; ``network_step`` runs strictly forward-then-update, so the
weights used at step t are w(t) and w(t+1) is produced afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Tensor
from .plasticity import (
    InternalLossHead,
    NeuromodConfig,
    PlasticLayer,
    apply_update,
    compute_eta_from_normsq,
    gradient_deltas,
    gradient_normsq,
    hebbian_normsq,
    internal_loss,
    plastic_linear_forward,
)

BACKBONES = ("rnn", "lstm")
RULES = ("none", "hebbian", "gradient")
ALPHA_INITS = ("none", "uniform", "neg_uniform", "random")

_LSTM_GATES = (("i", "sigmoid"), ("f", "sigmoid"), ("g", "tanh"), ("o", "sigmoid"))


@dataclass
class NetworkConfig:
    backbone: str = "rnn"
    rule: str = "hebbian"
    hidden: int = 64
    input_dim: int = 3
    pred_dim: int = 1
    aux_dim: int = 4
    neuromod: NeuromodConfig = field(default_factory=NeuromodConfig)
    alpha_init: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.alpha_init not in ALPHA_INITS:
            raise ValueError(f"alpha_init must be one of {ALPHA_INITS}, got {self.alpha_init!r}")
        for name in ("hidden", "input_dim", "pred_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        # aux_dim 0 is legal: it is the baseline point of the dim sweep
        if self.aux_dim < 0:
            raise ValueError(f"aux_dim must be >= 0, got {self.aux_dim}")

    @property
    def out_dim(self) -> int:
        return 1 + self.pred_dim + self.aux_dim


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_dim: int
    out_dim: int
    bias: bool
    activation: str


def layer_specs(cfg: NetworkConfig) -> list[LayerSpec]:
    """Topology implied by the config; the encoder always feeds the backbone
    at the hidden width."""
    h = cfg.hidden
    specs = [LayerSpec("enc", cfg.input_dim, h, True, "relu")]
    if cfg.backbone == "rnn":
        specs += [
            LayerSpec("ih", h, h, True, "identity"),
            LayerSpec("hh", h, h, False, "identity"),
        ]
    else:
        for gate, _ in _LSTM_GATES:
            specs.append(LayerSpec(f"x{gate}", h, h, True, "identity"))
            specs.append(LayerSpec(f"h{gate}", h, h, False, "identity"))
    specs.append(LayerSpec("ro", h, cfg.out_dim, True, "identity"))
    return specs


@dataclass
class ModelOutput:
    """One step's output split into its three wire-format parts.

    Batched: ``eta_tilde`` is [B], ``y`` is [B, pred], ``y_aux`` is [B, aux];
    ``o`` keeps the unsplit readout."""

    eta_tilde: Tensor
    y: Tensor
    y_aux: Tensor
    o: Tensor


class PlasticNetwork:
    """Outer-loop parameters plus the live state of the current trial batch."""

    def __init__(self, cfg: NetworkConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.specs = layer_specs(cfg)
        # live trial state, populated by reset_trial
        self.tape: Tape | None = None
        self.batch = 0
        self.leaves: dict[str, Tensor] = {}
        self.layers: dict[str, PlasticLayer] = {}
        self.loss_head: InternalLossHead | None = None
        self.h: Tensor | None = None
        self.c: Tensor | None = None
        self.step_count = 0
        self.eta_log: list[np.ndarray] = []

    def plastic_layer_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = values[k].copy()


def _alpha_values(mode: str, shape: tuple, rng: np.random.Generator) -> np.ndarray | None:
    if mode == "none":
        return None
    if mode == "uniform":
        return np.ones(shape)
    if mode == "neg_uniform":
        return -np.ones(shape)
    return rng.uniform(-1.0, 1.0, shape)


def build_network(cfg: NetworkConfig, rng: np.random.Generator | None = None) -> PlasticNetwork:
    """Sample parameters: static weights and biases fan-out uniform in
    [-1/N, 1/N] with N the layer's output width; per-connection learning
    rates per ``alpha_init``; internal-loss head all ones."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    plastic = cfg.rule != "none"
    params: dict[str, np.ndarray] = {}
    for s in layer_specs(cfg):
        bound = 1.0 / s.out_dim
        params[f"{s.name}.w"] = rng.uniform(-bound, bound, (s.in_dim, s.out_dim))
        if s.bias:
            params[f"{s.name}.b"] = rng.uniform(-bound, bound, s.out_dim)
        if plastic:
            alpha = _alpha_values(cfg.alpha_init, (s.in_dim, s.out_dim), rng)
            if alpha is not None:
                params[f"{s.name}.alpha"] = alpha
            if cfg.rule == "gradient" and s.bias:
                beta = _alpha_values(cfg.alpha_init, (s.out_dim,), rng)
                if beta is not None:
                    params[f"{s.name}.beta"] = beta
    if plastic:
        params["w_out"] = np.ones(cfg.out_dim)
    return PlasticNetwork(cfg, params)


def param_count(net: PlasticNetwork) -> int:
    """Number of outer-loop trainable scalars."""
    return sum(v.size for v in net.params.values())


def reset_trial(net: PlasticNetwork, tape: Tape | None = None, batch: int = 1) -> None:
    """Zero the plastic tensors and hidden state and start a fresh tape."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    cfg = net.cfg
    tape = tape if tape is not None else Tape()
    plastic = cfg.rule != "none"
    net.tape = tape
    net.batch = batch
    net.leaves = {name: tape.leaf(value) for name, value in net.params.items()}
    net.layers = {}
    for s in net.specs:
        alpha = net.leaves.get(f"{s.name}.alpha")
        beta = net.leaves.get(f"{s.name}.beta")
        layer = PlasticLayer(
            name=s.name,
            in_dim=s.in_dim,
            out_dim=s.out_dim,
            w_static=net.leaves[f"{s.name}.w"],
            b_static=net.leaves.get(f"{s.name}.b"),
            activation=s.activation,
            alpha=alpha,
            beta=beta,
        )
        if plastic:
            layer.w_plastic = tape.constant(np.zeros((batch, s.in_dim, s.out_dim)))
            layer.coef_w = alpha if alpha is not None else tape.constant(np.ones((s.in_dim, s.out_dim)))
            if cfg.rule == "gradient" and s.bias:
                layer.b_plastic = tape.constant(np.zeros((batch, s.out_dim)))
                layer.coef_b = beta if beta is not None else tape.constant(np.ones(s.out_dim))
        net.layers[s.name] = layer
    net.loss_head = InternalLossHead(net.leaves["w_out"]) if plastic else None
    net.h = tape.constant(np.zeros((batch, cfg.hidden)))
    net.c = tape.constant(np.zeros((batch, cfg.hidden))) if cfg.backbone == "lstm" else None
    net.step_count = 0
    net.eta_log = []


def rnn_cell_step(net: PlasticNetwork, x_enc: Tensor):
    """Elman step h' = relu(b + W_ih x + W_hh h); returns (h', hebbian pairs)."""
    tape = net.tape
    from_x, _ = plastic_linear_forward(net.layers["ih"], x_enc)
    from_h, _ = plastic_linear_forward(net.layers["hh"], net.h)
    h_new = tape.record("relu", tape.record("add", from_x, from_h))
    return h_new, [("ih", x_enc, h_new), ("hh", net.h, h_new)]


def lstm_cell_step(net: PlasticNetwork, x_enc: Tensor):
    """Standard LSTM step; every gate matrix carries a plastic component.

    The hebbian pair for each matrix uses that matrix's own input and the
    post-activation gate value."""
    tape = net.tape
    gates: dict[str, Tensor] = {}
    pairs = []
    for gate, act in _LSTM_GATES:
        from_x, _ = plastic_linear_forward(net.layers[f"x{gate}"], x_enc)
        from_h, _ = plastic_linear_forward(net.layers[f"h{gate}"], net.h)
        val = tape.record(act, tape.record("add", from_x, from_h))
        gates[gate] = val
        pairs += [(f"x{gate}", x_enc, val), (f"h{gate}", net.h, val)]
    c_new = tape.record(
        "add",
        tape.record("multiply", gates["f"], net.c),
        tape.record("multiply", gates["i"], gates["g"]),
    )
    h_new = tape.record("multiply", gates["o"], tape.record("tanh", c_new))
    return h_new, c_new, pairs


def network_step(net: PlasticNetwork, x) -> ModelOutput:
    """One inner-loop step: encode, recur, read out, then apply the rule's
    plastic update at the step's internal learning rate."""
    cfg = net.cfg
    tape = net.tape
    if tape is None:
        raise RuntimeError("reset_trial must run before network_step")
    if not isinstance(x, Tensor):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        x = tape.constant(arr)
    if x.shape != (net.batch, cfg.input_dim):
        raise ValueError(f"input shape {x.shape} != {(net.batch, cfg.input_dim)}")

    x_enc, _ = plastic_linear_forward(net.layers["enc"], x)
    pairs = [("enc", x, x_enc)]
    if cfg.backbone == "rnn":
        h_new, cell_pairs = rnn_cell_step(net, x_enc)
        c_new = None
    else:
        h_new, c_new, cell_pairs = lstm_cell_step(net, x_enc)
    pairs += cell_pairs
    o, _ = plastic_linear_forward(net.layers["ro"], h_new)
    pairs.append(("ro", h_new, o))

    eta_tilde = tape.record("col", o, ctx=0)
    y = tape.record("cols", o, ctx=(1, 1 + cfg.pred_dim))
    y_aux = tape.record("cols", o, ctx=(1 + cfg.pred_dim, cfg.out_dim))

    if cfg.rule == "hebbian":
        normsq = hebbian_normsq([(p, q) for _, p, q in pairs])
        eta = compute_eta_from_normsq(eta_tilde, normsq, cfg.neuromod)
        for name, p, q in pairs:
            layer = net.layers[name]
            layer.w_plastic = tape.record("hebb_update", layer.w_plastic, p, q, eta, layer.coef_w)
        net.eta_log.append(eta.data.copy())
    elif cfg.rule == "gradient":
        loss = internal_loss(o, net.loss_head)
        plastic_layers = [net.layers[name] for name, _, _ in pairs]
        deltas = gradient_deltas(loss, plastic_layers)
        eta = compute_eta_from_normsq(eta_tilde, gradient_normsq(deltas), cfg.neuromod)
        for layer, (dw, db) in zip(plastic_layers, deltas):
            apply_update(layer, dw, db, eta)
        net.eta_log.append(eta.data.copy())
    else:
        net.eta_log.append(np.zeros(net.batch))

    net.h = h_new
    if c_new is not None:
        net.c = c_new
    net.step_count += 1
    return ModelOutput(eta_tilde, y, y_aux, o)
