"""Small feed-forward regression heads (gripper aperture, hand retargeting) in numpy."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyDataset

ACTIVATIONS = ("relu", "tanh")
SQUASHES = ("none", "sigmoid")


@dataclass(frozen=True)
class FeatureVector:
    """Per-frame input vector (semantic embedding or hand state)."""

    frame: int
    values: np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "relu"
    output_squash: str = "sigmoid"
    bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need >= 2 layers of positive width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_squash not in SQUASHES:
            raise ValueError(f"output_squash must be one of {SQUASHES}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_in(self):
        return self.layer_widths[0]

    @property
    def n_out(self):
        return self.layer_widths[-1]


def gripper_spec(dim, hidden=(256, 64)):
    return MlpSpec((dim, *hidden, 1), "relu", "sigmoid")


def retarget_spec(dim, joints, hidden=(256, 64)):
    return MlpSpec((dim, *hidden, joints), "relu", "none")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 2000
    batch_size: int = 8
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate >= 0, epochs >= 1 and batch_size >= 1 required")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Mlp:
    """Weights for an MlpSpec; ``weights`` is a list of (W, b) with W shaped (out, in)."""

    def __init__(self, spec: MlpSpec, weights, joint_limits=None):
        self.spec = spec
        self.weights = [(np.array(W, float), np.array(b, float)) for W, b in weights]
        for (W, b), n_in, n_out in zip(self.weights, spec.layer_widths, spec.layer_widths[1:]):
            if W.shape != (n_out, n_in) or b.shape != (n_out,):
                raise DimensionMismatch(f"layer shape {W.shape}/{b.shape} vs ({n_out}, {n_in})")
        self.joint_limits = None if joint_limits is None else np.asarray(joint_limits, float)
        self.clamp_events = 0

    @classmethod
    def init(cls, spec: MlpSpec, seed=0, joint_limits=None):
        """He-scaled normal init (Xavier for tanh), zero biases."""
        rng = np.random.default_rng(seed)
        ws = []
        for n_in, n_out in zip(spec.layer_widths, spec.layer_widths[1:]):
            gain = 2.0 if spec.activation == "relu" else 1.0
            ws.append((rng.normal(0.0, np.sqrt(gain / n_in), (n_out, n_in)), np.zeros(n_out)))
        return cls(spec, ws, joint_limits)

    @classmethod
    def zeros(cls, spec: MlpSpec):
        return cls(spec, [(np.zeros((o, i)), np.zeros(o))
                          for i, o in zip(spec.layer_widths, spec.layer_widths[1:])])

    def copy(self):
        return Mlp(self.spec, [(W.copy(), b.copy()) for W, b in self.weights], self.joint_limits)

    # flat parameter view, used by the optimizer and the gradient check
    def params(self):
        return [p for W, b in self.weights for p in ((W, b) if self.spec.bias else (W,))]

    def _act(self, z):
        return np.maximum(z, 0.0) if self.spec.activation == "relu" else np.tanh(z)

    def _check(self, X):
        X = np.asarray(X, float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.spec.n_in:
            raise DimensionMismatch(f"input width {X.shape[1]}, head expects {self.spec.n_in}")
        return X, single

    def _forward(self, X):
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(self.weights):
            z = h @ W.T + (b if self.spec.bias else 0.0)
            if i < last:
                h = self._act(z)
            else:
                h = _sigmoid(z) if self.spec.output_squash == "sigmoid" else z
            acts.append(h)
        return acts

    def forward(self, x):
        X, single = self._check(x)
        y = self._forward(X)[-1]
        return y[0] if single else y

    def predict(self, x):
        """forward() followed by per-joint clamping when limits are declared."""
        y = self.forward(x)
        if self.joint_limits is not None:
            lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
            c = np.clip(y, lo, hi)
            self.clamp_events += int(np.count_nonzero(c != y))
            y = c
        return y

    def loss_and_grads(self, X, Y):
        """Mean squared error (averaged over samples and outputs) and its gradients."""
        X, _ = self._check(X)
        Y = np.asarray(Y, float).reshape(len(X), -1)
        if Y.shape[1] != self.spec.n_out:
            raise DimensionMismatch(f"target width {Y.shape[1]}, head outputs {self.spec.n_out}")
        acts = self._forward(X)
        out = acts[-1]
        diff = out - Y
        loss = float(np.mean(diff**2))
        g = 2.0 * diff / diff.size
        if self.spec.output_squash == "sigmoid":
            g = g * out * (1.0 - out)
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            W, _ = self.weights[i]
            grads[i] = (g.T @ acts[i], g.sum(axis=0))
            if i:
                g = g @ W
                a = acts[i]
                g = g * (a > 0) if self.spec.activation == "relu" else g * (1.0 - a**2)
        return loss, grads

    def grad_list(self, grads):
        return [p for gW, gb in grads for p in ((gW, gb) if self.spec.bias else (gW,))]

    def to_json(self):
        d = {"spec": asdict(self.spec),
             "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.weights]}
        if self.joint_limits is not None:
            d["joint_limits"] = self.joint_limits.tolist()
        return d

    @classmethod
    def from_json(cls, d):
        spec = MlpSpec(**{**d["spec"], "layer_widths": tuple(d["spec"]["layer_widths"])})
        return cls(spec, [(L["W"], L["b"]) for L in d["layers"]], d.get("joint_limits"))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class TrainResult:
    model: Mlp
    losses: list = field(default_factory=list)  # full-dataset MSE after each epoch

    @property
    def final_loss(self):
        return self.losses[-1]


def train(model: Mlp, dataset, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Minibatch SGD (optional momentum) on MSE; ``model`` is copied, not mutated."""
    if len(dataset) == 0:
        raise EmptyDataset("no training pairs")
    X = np.array([np.asarray(x, float) for x, _ in dataset])
    Y = np.array([np.atleast_1d(np.asarray(y, float)) for _, y in dataset])
    if X.ndim != 2 or X.shape[1] != model.spec.n_in:
        raise DimensionMismatch(f"inputs must be {model.spec.n_in}-dimensional")
    if Y.shape[1] != model.spec.n_out:
        raise DimensionMismatch(f"targets must be {model.spec.n_out}-dimensional")
    net = model.copy()
    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, grads = net.loss_and_grads(X[idx], Y[idx])
            for p, g, v in zip(params, net.grad_list(grads), velocity):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
        losses.append(net.loss_and_grads(X, Y)[0])
    return TrainResult(net, losses)


def gradient_check(model: Mlp, x, y, eps=1e-5):
    """Max relative error between backprop and central-difference gradients of the MSE."""
    X = np.atleast_2d(np.asarray(x, float))
    Y = np.asarray(y, float).reshape(len(X), -1)
    net = model.copy()
    _, grads = net.loss_and_grads(X, Y)
    worst = 0.0
    for p, g in zip(net.params(), net.grad_list(grads)):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            lp = net.loss_and_grads(X, Y)[0]
            flat[j] = old - eps
            lm = net.loss_and_grads(X, Y)[0]
            flat[j] = old
            num = (lp - lm) / (2 * eps)
            denom = max(abs(num), abs(gflat[j]), 1e-8)
            worst = max(worst, abs(num - gflat[j]) / denom)
    return worst


def with_context(features):
    """Concatenate each frame's features with its neighbours (edges repeat)."""
    F = np.asarray(features, float)
    if len(F) == 0:
        return F
    prev = np.vstack([F[:1], F[:-1]])
    nxt = np.vstack([F[1:], F[-1:]])
    return np.hstack([prev, F, nxt])


def predict_sequence(model: Mlp, features, context=False):
    """One output vector per frame, in order."""
    F = [np.asarray(getattr(f, "values", f), float) for f in features]
    if not F:
        return []
    dims = {f.shape for f in F}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent feature dimensions {sorted(dims)}")
    X = np.array(F)
    if context:
        X = with_context(X)
    return list(np.atleast_2d(model.predict(X)))


def binarize(aperture, threshold=0.5):
    return float(aperture >= threshold)
