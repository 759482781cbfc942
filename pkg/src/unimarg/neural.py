"""Shared-trunk, multi-head feed-forward network written directly in numpy.

The trunk is ``h`` dense layers of width ``s``. All heads read the last hidden
layer; their weights live side by side in one ``(s, K)`` matrix, and each
site's head is a column slice of it (see ``EncodingLayout.out_slices``).
Categorical heads emit logits (softmax at prediction time), continuous heads
emit a standardised mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .masking import EncodingLayout, PriorStats
from .program import ProgramSpec, program_from_dict, program_to_dict

PRESETS = {1: (2, 10), 2: (4, 35), 3: (8, 100)}
STANDARD = "standard"
FLEXIBLE = "flexible"
MODES = (STANDARD, FLEXIBLE)


@dataclass(frozen=True)
class Architecture:
    h: int
    s: int
    activation: str = "relu"
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.h < 1 or self.s < 1:
            raise ValidationError("need h >= 1 hidden layers of width s >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout probability must be in [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @classmethod
    def preset(cls, size: int, **kw) -> "Architecture":
        try:
            h, s = PRESETS[int(size)]
        except KeyError:
            raise ValidationError(f"unknown architecture preset {size!r}; choose 1, 2 or 3") from None
        return cls(h, s, **kw)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return z > 0


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def effective_lr(self) -> float:
        """Inverse-time decayed step size used by the next update."""
        return self.lr / (1.0 + self.decay * self.t)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "decay": self.decay,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, obj) -> "AdamState":
        return cls(
            [np.array(a, dtype=float) for a in obj["m"]],
            [np.array(a, dtype=float) for a in obj["v"]],
            int(obj["t"]),
            float(obj["lr"]),
            float(obj["decay"]),
        )


def adam_step(state: AdamState, params: list, grads: list, names: list[str] | None = None) -> list:
    """One in-place ADAM update with bias correction; returns ``params``.

    ``params`` may be views (head slices) into larger arrays.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("parameter, gradient and moment lists differ in length")
    for k, g in enumerate(grads):
        if not np.isfinite(g).all():
            where = names[k] if names else f"parameter {k}"
            raise NumericError(f"non-finite gradient in {where}")
    lr = state.effective_lr()
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1**state.t)
    c2 = 1.0 - b2**state.t
    for k, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p -= step * m / denom
        if not np.isfinite(p).all():
            where = names[k] if names else f"parameter {k}"
            raise NumericError(f"non-finite parameter in {where} after update")
    return params


@dataclass
class UmModel:
    program: ProgramSpec
    layout: EncodingLayout
    stats: PriorStats
    arch: Architecture
    mode: str
    weights: list  # trunk weight matrices, (in, out)
    biases: list
    head_w: np.ndarray  # (s, K)
    head_b: np.ndarray  # (K,)
    optimizers: list = field(default_factory=list)
    preset: int | None = None
    rng_seed: int = 0
    steps_trained: int = 0

    # -- parameter views -----------------------------------------------------------

    def trunk_params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def trunk_names(self) -> list[str]:
        names = []
        for l in range(len(self.weights)):
            names += [f"trunk layer {l} weight", f"trunk layer {l} bias"]
        return names

    def all_params(self) -> list:
        return self.trunk_params() + [self.head_w, self.head_b]

    def head_params(self, site: int) -> list:
        sl = self.layout.out_slices[site]
        return [self.head_w[:, sl], self.head_b[sl]]

    def head_param_names(self, site: int) -> list[str]:
        name = self.program.sites[site].name
        return [f"head {name!r} weight", f"head {name!r} bias"]

    def params_for_optimizer(self, k: int) -> tuple[list, list[str]]:
        if self.mode == STANDARD:
            return self.all_params(), self.trunk_names() + ["head weights", "head biases"]
        return self.trunk_params() + self.head_params(k), self.trunk_names() + self.head_param_names(k)

    def n_params(self) -> int:
        return sum(p.size for p in self.all_params())


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def build_um(
    program: ProgramSpec,
    arch: int | Architecture,
    mode: str,
    layout: EncodingLayout,
    stats: PriorStats,
    rng: np.random.Generator,
    rng_seed: int = 0,
) -> UmModel:
    """Allocate and initialise a network for ``program``.

    ``arch`` is a preset size (1, 2, 3) or an explicit :class:`Architecture`.
    Flexible mode gets one optimiser per head, standard mode a single one.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown training mode {mode!r}")
    if layout.n_sites != program.n_sites:
        raise ValidationError("layout was built for a different program")
    preset = None
    if not isinstance(arch, Architecture):
        preset = int(arch)
        arch = Architecture.preset(preset)
    widths = [layout.width] + [arch.s] * arch.h
    weights = [_glorot(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    head_w = np.empty((arch.s, layout.out_width))
    for sl in layout.out_slices:
        head_w[:, sl] = _glorot(rng, arch.s, sl.stop - sl.start)
    model = UmModel(
        program, layout, stats, arch, mode, weights, biases, head_w, np.zeros(layout.out_width),
        preset=preset, rng_seed=rng_seed,
    )
    n_opt = 1 if mode == STANDARD else program.n_sites
    model.optimizers = [AdamState.zeros_like(model.params_for_optimizer(k)[0]) for k in range(n_opt)]
    return model


# -- forward / backward ------------------------------------------------------------


def _check_input(x):
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")


def _trunk(model: UmModel, x: np.ndarray, dropout_rng=None):
    act, _ = _ACTIVATIONS[model.arch.activation]
    pre, hidden, drops = [], [x], []
    p = model.arch.dropout_p
    a = x
    for w, b in zip(model.weights, model.biases):
        z = a @ w + b
        a = act(z)
        if dropout_rng is not None and p > 0:
            keep = (dropout_rng.random(a.shape) >= p) / (1.0 - p)
            a = a * keep
            drops.append(keep)
        else:
            drops.append(None)
        pre.append(z)
        hidden.append(a)
    return pre, hidden, drops


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def raw_outputs(model: UmModel, x: np.ndarray) -> np.ndarray:
    """Head outputs before softmax, shape ``(n, K)``."""
    _, hidden, _ = _trunk(model, x)
    return hidden[-1] @ model.head_w + model.head_b


def forward(model: UmModel, x: np.ndarray) -> np.ndarray:
    """Predictions for one input vector or a batch.

    Categorical blocks hold probability vectors, continuous slots hold the
    standardised predicted mean. Split per site with :func:`per_site`.
    """
    x = np.asarray(x, dtype=float)
    _check_input(x)
    single = x.ndim == 1
    out = raw_outputs(model, np.atleast_2d(x))
    for _, _, cols in model.layout.cat_groups:
        out[:, cols] = _softmax(out[:, cols])
    return out[0] if single else out


def forward_site(model: UmModel, x: np.ndarray, site: int) -> np.ndarray:
    """Prediction of a single head for a batch: ``(n, k)`` probabilities or ``(n,)`` means."""
    _check_input(x)
    _, hidden, _ = _trunk(model, x)
    sl = model.layout.out_slices[site]
    out = hidden[-1] @ model.head_w[:, sl] + model.head_b[sl]
    if model.layout.categorical[site]:
        return _softmax(out)
    return out[:, 0]


def per_site(model: UmModel, out: np.ndarray) -> list:
    return [out[..., sl] if c else out[..., sl.start] for sl, c in zip(model.layout.out_slices, model.layout.categorical)]


def loss_per_head(model: UmModel, predictions: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-site loss from post-softmax predictions: ``-log p[t]`` or ``(pred - t)^2``."""
    predictions = np.atleast_2d(predictions)
    target = np.atleast_2d(target)
    out = np.empty(target.shape)
    for i, (sl, cat) in enumerate(zip(model.layout.out_slices, model.layout.categorical)):
        if cat:
            p = predictions[:, sl][np.arange(len(target)), target[:, i].astype(np.intp)]
            with np.errstate(divide="ignore"):
                out[:, i] = -np.log(p)
        else:
            out[:, i] = (predictions[:, sl.start] - target[:, i]) ** 2
    return out if out.shape[0] > 1 else out[0]


def _head_losses_and_delta(layout: EncodingLayout, logits: np.ndarray, target: np.ndarray):
    """Per-site batch-mean losses (N,) and d(mean loss)/d(logits) for all heads."""
    n = logits.shape[0]
    losses = np.empty(target.shape[1])
    delta = np.empty_like(logits)
    rows = np.arange(n)[:, None]
    for k, sites, cols in layout.cat_groups:
        lg = logits[:, cols]  # (n, m, k)
        logp = _log_softmax(lg)
        t = target[:, sites].astype(np.intp)  # (n, m)
        picked = np.take_along_axis(logp, t[..., None], axis=2)[..., 0]
        losses[sites] = -picked.mean(axis=0)
        d = np.exp(logp)
        d[rows, np.arange(len(sites))[None, :], t] -= 1.0
        delta[:, cols] = d / n
    if len(layout.cont_sites):
        diff = logits[:, layout.cont_cols] - target[:, layout.cont_sites]
        losses[layout.cont_sites] = (diff**2).mean(axis=0)
        delta[:, layout.cont_cols] = 2.0 * diff / n
    return losses, delta


def _head_loss_and_delta(layout: EncodingLayout, site: int, out: np.ndarray, target: np.ndarray):
    n = out.shape[0]
    if layout.categorical[site]:
        logp = _log_softmax(out)
        t = target[:, site].astype(np.intp)
        loss = -logp[np.arange(n), t].mean()
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        return loss, d / n
    diff = out[:, 0] - target[:, site]
    return (diff**2).mean(), (2.0 * diff / n)[:, None]


def _backprop_trunk(model: UmModel, pre, hidden, drops, d_hidden):
    _, act_grad = _ACTIVATIONS[model.arch.activation]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    d = d_hidden
    for l in range(len(model.weights) - 1, -1, -1):
        if drops[l] is not None:
            d = d * drops[l]
            a = hidden[l + 1] / np.where(drops[l] > 0, drops[l], 1.0)
        else:
            a = hidden[l + 1]
        dz = d * act_grad(pre[l], a)
        gw[l] = hidden[l].T @ dz
        gb[l] = dz.sum(axis=0)
        if l:
            d = dz @ model.weights[l].T
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    return grads


def loss_and_grads(model: UmModel, x: np.ndarray, target: np.ndarray, dropout_rng=None):
    """Batch-mean per-head losses and gradients of their sum over all parameters."""
    pre, hidden, drops = _trunk(model, x, dropout_rng)
    logits = hidden[-1] @ model.head_w + model.head_b
    losses, delta = _head_losses_and_delta(model.layout, logits, target)
    grads = _backprop_trunk(model, pre, hidden, drops, delta @ model.head_w.T)
    return losses, grads + [hidden[-1].T @ delta, delta.sum(axis=0)]


def head_loss_and_grads(model: UmModel, x: np.ndarray, target: np.ndarray, site: int, dropout_rng=None):
    """Batch-mean loss of one head and its gradient over trunk + that head's slice."""
    pre, hidden, drops = _trunk(model, x, dropout_rng)
    sl = model.layout.out_slices[site]
    w = model.head_w[:, sl]
    out = hidden[-1] @ w + model.head_b[sl]
    loss, delta = _head_loss_and_delta(model.layout, site, out, target)
    grads = _backprop_trunk(model, pre, hidden, drops, delta @ w.T)
    return loss, grads + [hidden[-1].T @ delta, delta.sum(axis=0)]


@dataclass
class Gradients:
    weights: list
    biases: list
    head_w: np.ndarray
    head_b: np.ndarray

    def as_list(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]


def backward(model: UmModel, x: np.ndarray, target: np.ndarray, head_subset=None) -> Gradients:
    """Exact gradient of the batch-mean loss summed over ``head_subset`` (all heads if None).

    Head parameters of sites outside the subset get zero gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if head_subset is None:
        _, grads = loss_and_grads(model, x, target)
        h = len(model.weights)
        return Gradients(grads[0:2 * h:2], grads[1:2 * h:2], grads[-2], grads[-1])
    if isinstance(head_subset, (int, np.integer)):
        head_subset = [int(head_subset)]
    sites = sorted(set(head_subset))
    pre, hidden, drops = _trunk(model, x)
    logits = hidden[-1] @ model.head_w + model.head_b
    _, delta = _head_losses_and_delta(model.layout, logits, target)
    keep = np.zeros(model.layout.out_width, dtype=bool)
    for i in sites:
        keep[model.layout.out_slices[i]] = True
    delta[:, ~keep] = 0.0
    grads = _backprop_trunk(model, pre, hidden, drops, delta @ model.head_w.T)
    return Gradients(grads[0::2], grads[1::2], hidden[-1].T @ delta, delta.sum(axis=0))


# -- checkpoints -------------------------------------------------------------------


def model_to_dict(model: UmModel) -> dict:
    heads = {}
    for site, sl in zip(model.program.sites, model.layout.out_slices):
        heads[site.name] = {"weight": model.head_w[:, sl].tolist(), "bias": model.head_b[sl].tolist()}
    return {
        "program": program_to_dict(model.program),
        "arch": {
            "h": model.arch.h,
            "s": model.arch.s,
            "activation": model.arch.activation,
            "dropout": model.arch.dropout_p,
        },
        "preset": model.preset,
        "mode": model.mode,
        "stats": model.stats.to_dict(),
        "trunk": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "heads": heads,
        "optimizers": [o.to_dict() for o in model.optimizers],
        "rng_seed": model.rng_seed,
        "steps_trained": model.steps_trained,
    }


def model_from_dict(obj: dict) -> UmModel:
    try:
        program = program_from_dict(obj["program"])
        layout = EncodingLayout.for_program(program)
        a = obj["arch"]
        arch = Architecture(int(a["h"]), int(a["s"]), a.get("activation", "relu"), float(a.get("dropout", 0.0)))
        weights = [np.array(l["weight"], dtype=float).reshape(-1, arch.s) for l in obj["trunk"]]
        biases = [np.array(l["bias"], dtype=float) for l in obj["trunk"]]
        head_w = np.empty((arch.s, layout.out_width))
        head_b = np.empty(layout.out_width)
        for site, sl in zip(program.sites, layout.out_slices):
            head = obj["heads"][site.name]
            head_w[:, sl] = np.array(head["weight"], dtype=float).reshape(arch.s, -1)
            head_b[sl] = head["bias"]
        model = UmModel(
            program, layout, PriorStats.from_dict(obj["stats"]), arch, obj["mode"], weights, biases,
            head_w, head_b, preset=obj.get("preset"), rng_seed=int(obj.get("rng_seed", 0)),
            steps_trained=int(obj.get("steps_trained", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed checkpoint: {exc}") from None
    if len(weights) != arch.h or weights[0].shape[0] != layout.width:
        raise ValidationError("checkpoint trunk shapes do not match its program")
    if "optimizers" in obj:
        model.optimizers = [AdamState.from_dict(o) for o in obj["optimizers"]]
    else:
        n_opt = 1 if model.mode == STANDARD else program.n_sites
        model.optimizers = [AdamState.zeros_like(model.params_for_optimizer(k)[0]) for k in range(n_opt)]
    return model


def save_checkpoint(model: UmModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)


def load_checkpoint(path) -> UmModel:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"checkpoint is not valid JSON: {exc}") from None
    return model_from_dict(obj)
