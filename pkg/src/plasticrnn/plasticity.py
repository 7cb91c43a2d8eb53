"""The two plasticity rules and their shared neuromodulation machinery.

A plastic layer's weight is a static part plus a plastic part that starts at
zero each trial. The Hebbian rule moves the plastic part toward the outer
product of pre- and post-synaptic activity; the gradient rule moves it along
the gradient of a self-generated internal loss. Both are scaled by a global
internal learning rate: a learned cap, a sigmoid of the model's own output
coordinate, and a norm clip that slows large updates.

Functions here are rank-polymorphic: rank-1 activations mean a single trial,
rank-2 a batch of independent trials (leading axis), with plastic tensors one
rank higher in the batched case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")

# Norms at or below max_norm * this are shifted into the clip's constant
# branch (factor exactly 1, derivative exactly 0), which is also the value
# the true min takes there; dividing by them would poison gradients.
_NORM_FLOOR_RATIO = 1e-9


@dataclass
class NeuromodConfig:
    """Internal learning-rate settings: cap, norm clip, and adaptivity."""

    eta0: float = 0.2
    max_norm: float = 1.0
    modulated: bool = True
    # Flow-through is the default; True detaches the clip factor instead.
    stop_clip_gradient: bool = False

    def __post_init__(self):
        if self.eta0 < 0:
            raise ValueError(f"eta0 must be >= 0, got {self.eta0}")
        if self.max_norm <= 0:
            raise ValueError(f"max_norm must be > 0, got {self.max_norm}")


@dataclass
class InternalLossHead:
    """Learned readout of the internal loss; initialized to all ones."""

    w_out: Tensor

    @property
    def dim(self) -> int:
        return self.w_out.shape[0]


@dataclass
class PlasticLayer:
    """One linear map with a static and a plastic component.

    ``alpha``/``beta`` are the trainable per-connection learning rates; when
    a layer is built without them (alpha_init "none") the update still runs
    with ``coef_*`` fixed to ones. ``w_plastic`` is None for non-plastic
    layers; ``b_plastic`` exists only under the gradient rule, so Hebbian
    updates can never touch a bias.
    """

    name: str
    in_dim: int
    out_dim: int
    w_static: Tensor
    b_static: Tensor | None
    activation: str
    alpha: Tensor | None = None
    beta: Tensor | None = None
    w_plastic: Tensor | None = None
    b_plastic: Tensor | None = None
    coef_w: Tensor | None = None
    coef_b: Tensor | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _apply_activation(tape: Tape, name: str, x: Tensor) -> Tensor:
    if name == "identity":
        return x
    return tape.record(name, x)


def plastic_linear_forward(layer: PlasticLayer, p: Tensor) -> tuple[Tensor, Tensor]:
    """q = act((b + b_plastic) + (w_static + w_plastic)^T p); returns (q, preact)."""
    tape = layer.w_static.tape
    batched = p.rank == 2
    pre = tape.record("matmul", p, layer.w_static)
    if layer.w_plastic is not None:
        if layer.w_plastic.rank == 3:
            plastic = tape.record("bvm", layer.w_plastic, p)
        else:
            plastic = tape.record("matmul", p, layer.w_plastic)
        pre = tape.record("add", pre, plastic)
    if layer.b_static is not None:
        pre = tape.record("add0" if batched else "add", pre, layer.b_static)
    if layer.b_plastic is not None:
        pre = tape.record("add", pre, layer.b_plastic)
    return _apply_activation(tape, layer.activation, pre), pre


def hebbian_delta(p: Tensor, q: Tensor) -> Tensor:
    """Outer product of pre- and post-synaptic activity."""
    kind = "bouter" if p.rank == 2 else "outer"
    return p.tape.record(kind, p, q)


def internal_loss(o: Tensor, head: InternalLossHead) -> Tensor:
    """Mean squared elementwise product of the output with the loss head.

    Rank-1 input gives a rank-0 loss; rank-2 gives one loss per sample.
    """
    tape = o.tape
    if o.rank == 1:
        return tape.record("mean", tape.record("square", tape.record("multiply", o, head.w_out)))
    if o.rank == 2:
        sq = tape.record("square", tape.record("mul0", o, head.w_out))
        return tape.record("smul", tape.record("bsum", sq), ctx=1.0 / head.dim)
    raise ShapeError(f"internal_loss: expected rank 1 or 2 output, got {o.shape}")


def _eta_from_safe_norm(eta_tilde: Tensor | None, norm: Tensor, cfg: NeuromodConfig) -> Tensor:
    tape = norm.tape
    ratio = tape.record("smul", tape.record("reciprocal", norm), ctx=cfg.max_norm)
    factor = tape.record("minc", ratio, ctx=1.0)
    if cfg.stop_clip_gradient:
        factor = tape.constant(factor.data.copy())
    if cfg.modulated:
        if eta_tilde is None:
            raise ValueError("modulated eta needs the eta_tilde output coordinate")
        base = tape.record("smul", tape.record("sigmoid", eta_tilde), ctx=cfg.eta0)
    else:
        base = tape.constant(np.full(norm.shape, cfg.eta0))
    return tape.record("multiply", base, factor)


def compute_eta(eta_tilde: Tensor | None, delta_norm: Tensor, cfg: NeuromodConfig) -> Tensor:
    """Internal learning rate: eta0 * sigmoid(eta_tilde) * min(1, max_norm/|delta|).

    A zero update norm takes the min's first branch (factor 1). With
    ``cfg.modulated`` false the sigmoid factor is the constant 1.
    """
    tape = delta_norm.tape
    floor = cfg.max_norm * _NORM_FLOOR_RATIO
    if np.any(delta_norm.data <= floor):
        pad = np.where(delta_norm.data > floor, 0.0, 0.5 * cfg.max_norm - delta_norm.data)
        delta_norm = tape.record("add", delta_norm, tape.constant(pad))
    return _eta_from_safe_norm(eta_tilde, delta_norm, cfg)


def compute_eta_from_normsq(eta_tilde: Tensor | None, normsq: Tensor, cfg: NeuromodConfig) -> Tensor:
    """compute_eta when the caller already has the squared update norm."""
    tape = normsq.tape
    floor = (cfg.max_norm * _NORM_FLOOR_RATIO) ** 2
    if np.any(normsq.data <= floor):
        pad = np.where(normsq.data > floor, 0.0, (0.5 * cfg.max_norm) ** 2 - normsq.data)
        normsq = tape.record("add", normsq, tape.constant(pad))
    return _eta_from_safe_norm(eta_tilde, tape.record("sqrt", normsq), cfg)


def delta_norm_hebbian(deltas: list[Tensor]) -> Tensor:
    """L2 norm of all update entries concatenated across layers."""
    if not deltas:
        raise ValueError("need at least one delta")
    tape = deltas[0].tape
    kind = "bsumsq" if deltas[0].rank == 3 else "sumsq"
    total = None
    for d in deltas:
        sq = tape.record(kind, d)
        total = sq if total is None else tape.record("add", total, sq)
    return tape.record("sqrt", total)


def hebbian_normsq(pairs: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Squared concatenated norm of the raw outer products, computed as
    |p|^2 |q|^2 per layer so the full matrices never materialize."""
    tape = pairs[0][0].tape
    kind = "bsumsq" if pairs[0][0].rank == 2 else "sumsq"
    total = None
    for p, q in pairs:
        term = tape.record("multiply", tape.record(kind, p), tape.record(kind, q))
        total = term if total is None else tape.record("add", total, term)
    return total


def gradient_deltas(loss: Tensor, layers: list[PlasticLayer]) -> list[tuple[Tensor, Tensor | None]]:
    """Per-layer (dL/dw_plastic, dL/db_plastic), still differentiable.

    ``loss`` may be per-sample (rank 1); samples stay independent, so the
    gradients of its sum are the per-sample gradients.
    """
    tape = loss.tape
    scalar = tape.record("sum", loss) if loss.rank == 1 else loss
    wrt = []
    for layer in layers:
        wrt.append(layer.w_plastic)
        if layer.b_plastic is not None:
            wrt.append(layer.b_plastic)
    grads = tape.grad(scalar, wrt, create_graph=True)
    out, k = [], 0
    for layer in layers:
        dw = grads[k]
        k += 1
        db = None
        if layer.b_plastic is not None:
            db = grads[k]
            k += 1
        out.append((dw, db))
    return out


def apply_update(layer: PlasticLayer, delta_w: Tensor, delta_b: Tensor | None, eta: Tensor) -> PlasticLayer:
    """w' = (1-eta) w + eta (alpha o delta); biases only when they are plastic."""
    tape = layer.w_static.tape
    layer.w_plastic = tape.record("plastic_update", layer.w_plastic, delta_w, eta, layer.coef_w)
    if layer.b_plastic is not None and delta_b is not None:
        layer.b_plastic = tape.record("plastic_update", layer.b_plastic, delta_b, eta, layer.coef_b)
    return layer


def gradient_normsq(deltas: list[tuple[Tensor, Tensor | None]]) -> Tensor:
    """Squared concatenated norm of all weight and bias gradients."""
    tape = deltas[0][0].tape
    # weight gradients are [B,i,o] in batched mode, [i,o] otherwise
    kind = "bsumsq" if deltas[0][0].rank == 3 else "sumsq"
    total = None
    for dw, db in deltas:
        for d in (dw, db):
            if d is None:
                continue
            sq = tape.record(kind, d)
            total = sq if total is None else tape.record("add", total, sq)
    return total
