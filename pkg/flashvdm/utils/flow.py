"""
Toy 2-d flow matching: data, the velocity MLP, guidance, solvers,
samplers, the energy-distance metric and the optimizer

Time runs from t = 0 (data) to t = 1 (noise):
`x_t = (1 - t) * x_0 + t * eps` and the model regresses the velocity
`eps - x_0`, so sampling integrates from t = 1 down to t = 0
"""

from copy import deepcopy
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from . import LOG_MANAGER
from .autodiff import ArrayLike, Tensor, as_tensor

log = LOG_MANAGER.get_logger(__name__)

GMM_MODES = 8
GMM_SIGMA = 0.05
NULL_LABEL = -1
N_CLASSES = 2
SINUSOID_MAX_FREQ = 100.0
W_SCALE = 10.0

Velocity = Callable[[np.ndarray, float], np.ndarray]
Times = Union[float, np.ndarray]


class ToyBatch(NamedTuple):
    points: np.ndarray
    labels: np.ndarray
    components: np.ndarray


def sample_toy_data(dist: str, n: int, seed: int, conditional: bool = True) -> ToyBatch:
    """
    Draw `n` labelled 2-d points

    + `gmm8`: eight Gaussians (sigma 0.05) on the unit circle, the class
    is the mode index mod 2
    + `checkerboard`: the usual 4x4 board over `[-2, 2]^2`, the class is
    the column parity

    Unconditional batches carry `NULL_LABEL` everywhere
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    if dist == "gmm8":
        components = rng.integers(0, GMM_MODES, n)
        angles = 2 * np.pi * components / GMM_MODES
        centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        points = centers + GMM_SIGMA * rng.standard_normal((n, 2))
        labels = components % N_CLASSES
    elif dist == "checkerboard":
        x1 = rng.random(n) * 4 - 2
        x2 = rng.random(n) - rng.integers(0, 2, n) * 2 + np.floor(x1) % 2
        points = np.stack([x1, x2], axis=1)
        col, row = np.floor(x1).astype(np.int64), np.floor(x2).astype(np.int64)
        components = (col + 2) * 4 + (row + 2)
        labels = col % N_CLASSES
    else:
        raise ValueError(f"unknown toy distribution {dist!r}")
    if not conditional:
        labels = np.full(n, NULL_LABEL)
    return ToyBatch(points, labels.astype(np.int64), components.astype(np.int64))


def drop_labels(labels: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """
    Replace a `rate` share of the labels by `NULL_LABEL` (classifier-free
    guidance dropout)
    """
    labels = np.array(labels, copy=True)
    labels[rng.random(len(labels)) < rate] = NULL_LABEL
    return labels


def sinusoidal_features(values: Times, n: int, freqs: int) -> np.ndarray:
    """
    `(n, 2 * freqs)` sin/cos features over geometric frequencies from
    1 to `SINUSOID_MAX_FREQ`
    """
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))
    bands = np.exp(np.linspace(0.0, np.log(SINUSOID_MAX_FREQ), freqs))
    angles = values[:, None] * bands[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Module:
    """
    Named parameter tensors with copy and (de)serialization helpers
    """

    def __init__(self) -> None:
        self.params: Dict[str, Tensor] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True)
        self.params[name] = tensor
        return tensor

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) ^ set(state))
            raise ValueError(f"parameter names differ: {', '.join(missing)}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ValueError(
                    f"{name}: expected shape {self.params[name].shape}, got {value.shape}"
                )
            self.params[name].data = value.copy()

    def copy(self) -> "Module":
        return deepcopy(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params.values())


def _init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)


class FlowModel(Module):
    """
    Velocity MLP `v(x, t, c[, w])`

    The input embedding is the sum of a linear map of x, a linear map
    of the sinusoidal features of t, a class-embedding row (the last
    row is the null class) and, for guidance-distilled students, a
    linear map of the sinusoidal features of w. `layers` hidden SiLU
    layers of width `hidden` follow
    """

    def __init__(
        self,
        hidden: int = 128,
        layers: int = 3,
        freqs: int = 16,
        n_classes: int = N_CLASSES,
        w_embedded: bool = False,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if layers < 1:
            raise ValueError(f"need at least one hidden layer, got {layers}")
        self.hidden = hidden
        self.layers = layers
        self.freqs = freqs
        self.n_classes = n_classes
        self.w_embedded = False

        rng = np.random.default_rng(seed)
        self._param("in.weight", _init(rng, 2, hidden))
        self._param("in.bias", np.zeros(hidden))
        self._param("t.weight", _init(rng, 2 * freqs, hidden))
        self._param("class.table", rng.standard_normal((n_classes + 1, hidden)) * 0.1)
        for i in range(1, layers):
            self._param(f"hidden{i}.weight", _init(rng, hidden, hidden))
            self._param(f"hidden{i}.bias", np.zeros(hidden))
        self._param("out.weight", _init(rng, hidden, 2))
        self._param("out.bias", np.zeros(2))
        if w_embedded:
            self.add_w_embedding()

    def add_w_embedding(self) -> None:
        """
        Attach the guidance-strength embedding with a zero output, so
        the model computes the same velocities as before
        """
        if self.w_embedded:
            raise ValueError("model already has a guidance embedding")
        self._param("w.weight", np.zeros((2 * self.freqs, self.hidden)))
        self._param("w.bias", np.zeros(self.hidden))
        self.w_embedded = True

    def with_w_embedding(self) -> "FlowModel":
        student = self.copy()
        student.add_w_embedding()
        return student

    def config(self) -> Dict[str, object]:
        return {
            "hidden": self.hidden,
            "layers": self.layers,
            "freqs": self.freqs,
            "n_classes": self.n_classes,
            "w_embedded": self.w_embedded,
        }

    @classmethod
    def from_config(cls, config: Mapping[str, object]) -> "FlowModel":
        return cls(**config)

    def _class_rows(self, c: ArrayLike, n: int) -> np.ndarray:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if (c >= self.n_classes).any():
            raise ValueError(f"class labels must be below {self.n_classes}")
        return np.where(c < 0, self.n_classes, c)

    def forward(
        self,
        x: ArrayLike,
        t: Times,
        c: ArrayLike,
        w: Optional[Times] = None,
        taps: bool = False,
    ) -> Union[Tensor, Tuple[Tensor, List[Tensor]]]:
        """
        Velocity at `(x, t)` for class `c`; negative labels select the
        null class. `w` is required by (and only accepted by) a model
        with a guidance embedding. With `taps` the hidden activations
        come back as well, first hidden layer first
        """
        x = as_tensor(x)
        n = x.shape[0]
        p = self.params
        h = (
            x @ p["in.weight"]
            + p["in.bias"]
            + Tensor(sinusoidal_features(t, n, self.freqs)) @ p["t.weight"]
            + p["class.table"].take(self._class_rows(c, n))
        )
        if self.w_embedded:
            if w is None:
                raise ValueError("a guidance-distilled model needs w")
            w_features = Tensor(sinusoidal_features(np.asarray(w) / W_SCALE, n, self.freqs))
            h = h + w_features @ p["w.weight"] + p["w.bias"]
        elif w is not None:
            raise ValueError("this model has no guidance embedding")

        h = h.silu()
        hidden = [h]
        for i in range(1, self.layers):
            h = (h @ p[f"hidden{i}.weight"] + p[f"hidden{i}.bias"]).silu()
            hidden.append(h)
        v = h @ p["out.weight"] + p["out.bias"]
        return (v, hidden) if taps else v

    __call__ = forward


def _column(values: Times, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=np.float64), (n,)).reshape(n, 1)


def cfg_velocity(model: FlowModel, x: ArrayLike, t: Times, c: ArrayLike, w: Times) -> Tensor:
    """
    Classifier-free guided velocity `v_uncond + w * (v_cond - v_uncond)`,
    evaluated as `(1 - w) * v_uncond + w * v_cond` so that w = 1 and
    w = 0 give the conditional and unconditional velocities exactly
    """
    x = as_tensor(x)
    n = x.shape[0]
    w = _column(w, n)
    if not np.isfinite(w).all():
        raise ValueError("guidance strength must be finite")
    v_cond = model(x, t, c)
    v_uncond = model(x, t, np.full(n, NULL_LABEL))
    return v_uncond * (1.0 - w) + v_cond * w


def model_velocity(
    model: FlowModel, c: ArrayLike, w: Optional[float] = None, guided: bool = False
) -> Velocity:
    """
    Velocity callback for `ode_solve`: classifier-free guidance at `w`
    when `guided`, otherwise the model itself (fed `w` if it has a
    guidance embedding)
    """

    def velocity(x: np.ndarray, t: float) -> np.ndarray:
        if guided:
            return cfg_velocity(model, x, t, c, w).data
        return model(x, t, c, w if model.w_embedded else None).data

    return velocity


def ode_solve(velocity: Velocity, x_start: np.ndarray, t_from: float, t_to: float, steps: int) -> np.ndarray:
    """
    Explicit Euler over `steps` uniform sub-steps from `t_from` down
    to `t_to`
    """
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    if not 0.0 <= t_to < t_from <= 1.0:
        raise ValueError(f"need 0 <= t_to < t_from <= 1, got {t_from} -> {t_to}")
    x = np.array(x_start, dtype=np.float64)
    times = np.linspace(t_from, t_to, steps + 1)
    for t, t_next in zip(times[:-1], times[1:]):
        x = x + (t_next - t) * velocity(x, t)
    return x


def student_predict(
    model: FlowModel,
    x_t: ArrayLike,
    t: Times,
    t_end: Times,
    c: ArrayLike,
    w: Optional[Times] = None,
) -> Tensor:
    """
    One big Euler step `x_t + (t_end - t) * v(x_t, t)`; returns `x_t`
    itself when `t_end == t`
    """
    x_t = as_tensor(x_t)
    n = x_t.shape[0]
    t_col, end_col = _column(t, n), _column(t_end, n)
    if (end_col > t_col).any():
        raise ValueError("t_end must not exceed t")
    v = model(x_t, t_col[:, 0], c, w if model.w_embedded else None)
    return x_t + v * (end_col - t_col)


def sample(
    model: FlowModel,
    n: int,
    labels: ArrayLike,
    nfe: int,
    w: float,
    seed: int,
) -> np.ndarray:
    """
    Draw `n` samples with `nfe` network evaluations per chain

    A plain model is integrated with guided Euler steps; a
    guidance-distilled student hops between `nfe + 1` uniform time
    boundaries with `student_predict`
    """
    if nfe < 1:
        raise ValueError(f"nfe must be positive, got {nfe}")
    rng = np.random.default_rng(seed)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    x = rng.standard_normal((n, 2))
    if not model.w_embedded:
        return ode_solve(model_velocity(model, labels, w, guided=True), x, 1.0, 0.0, nfe)
    times = np.linspace(1.0, 0.0, nfe + 1)
    for t, t_next in zip(times[:-1], times[1:]):
        x = student_predict(model, x, t, t_next, labels, w).data
    return x


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    `2 E|a - b| - E|a - a'| - E|b - b'|` with exact pairwise means
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("energy distance needs at least two samples per set")
    cross = cdist(a, b).mean()
    within_a = cdist(a, a).mean()
    within_b = cdist(b, b).mean()
    return max(0.0, float(2 * cross - within_a - within_b))


def pseudo_huber(a: ArrayLike, b: ArrayLike, c: float) -> Tensor:
    """
    `sqrt(|a - b|^2 + c^2) - c` over the last axis
    """
    if c <= 0:
        raise ValueError(f"pseudo-Huber constant must be positive, got {c}")
    diff = as_tensor(a) - b
    return ((diff * diff).sum(axis=-1) + c * c).sqrt() - c


def squared_error(a: ArrayLike, b: ArrayLike) -> Tensor:
    diff = as_tensor(a) - b
    return (diff * diff).sum(axis=-1)


def ema_update(
    target: Union[Module, Mapping[str, Tensor]],
    online: Union[Module, Mapping[str, Tensor]],
    decay: float,
) -> None:
    """
    `target <- decay * target + (1 - decay) * online`, in place
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    target_params = target.parameters() if isinstance(target, Module) else target
    online_params = online.parameters() if isinstance(online, Module) else online
    if set(target_params) != set(online_params):
        raise ValueError("target and online parameters differ")
    for name, tp in target_params.items():
        op = online_params[name]
        if tp.shape != op.shape:
            raise ValueError(f"{name}: shape {tp.shape} vs {op.shape}")
        tp.data = decay * tp.data + (1.0 - decay) * op.data


class Adam:
    """
    Adam over a dict of parameter tensors; parameters without a
    gradient are left alone
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self._m[name] = b1 * self._m[name] + (1 - b1) * p.grad
            self._v[name] = b2 * self._v[name] + (1 - b2) * p.grad**2
            m_hat = self._m[name] / (1 - b1**self.steps)
            v_hat = self._v[name] / (1 - b2**self.steps)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
