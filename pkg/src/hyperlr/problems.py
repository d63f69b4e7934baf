"""Differentiable objectives with exact gradient and Hessian-vector oracles.

Every objective works on a flat float64 weight vector. The second-order
oracle is an exact Hessian-vector product (hvp), never a finite-difference
approximation; finite differences live in fd_grad_oracle / fd_hvp_oracle and
are used only to cross-check the exact ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch, RngStream


class Objective:
    """Loss with first and second order oracles on a flat weight vector.

    hvp must be linear in v and agree with the transpose product wherever the
    Hessian is symmetric; objectives with a non-symmetric effective Hessian
    (see the gradient-clipping wrapper in dynamics) override hvp_t.
    """

    dim: int

    def loss(self, w: np.ndarray, batch: Batch | None = None) -> float:
        raise NotImplementedError

    def grad(self, w: np.ndarray, batch: Batch | None = None) -> np.ndarray:
        raise NotImplementedError

    def hvp(self, w: np.ndarray, v: np.ndarray, batch: Batch | None = None) -> np.ndarray:
        raise NotImplementedError

    def hvp_t(self, w: np.ndarray, u: np.ndarray, batch: Batch | None = None) -> np.ndarray:
        return self.hvp(w, u, batch)

    def loss_and_grad(self, w: np.ndarray, batch: Batch | None = None) -> tuple[float, np.ndarray]:
        return self.loss(w, batch), self.grad(w, batch)

    def _check_dim(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValueError(f"weight vector has shape {w.shape}, expected ({self.dim},)")
        return w


class Quadratic(Objective):
    """L(w) = 0.5 * sum_i a_i w_i^2 with fixed nonnegative curvature a."""

    def __init__(self, a_diag):
        a = np.asarray(a_diag, dtype=np.float64).ravel()
        if a.size == 0:
            raise ValueError("curvature vector must be nonempty")
        if np.any(a < 0):
            raise ValueError("curvature entries must be nonnegative")
        self.a = a
        self.dim = a.size

    def loss(self, w, batch=None) -> float:
        w = self._check_dim(w)
        return float(0.5 * np.dot(self.a, w * w))

    def grad(self, w, batch=None) -> np.ndarray:
        return self.a * self._check_dim(w)

    def hvp(self, w, v, batch=None) -> np.ndarray:
        return self.a * self._check_dim(v)


_BEALE_C = (1.5, 2.25, 2.625)


class Beale(Objective):
    """Sum of three squared residuals c_k - x + x*y^k on the plane.

    Global minimum at (3, 0.5) with value 0; large flat plateau near y = 1.
    """

    dim = 2

    def _residuals(self, x: float, y: float):
        powers = (y, y * y, y ** 3)
        return [(c - x + x * p, p) for c, p in zip(_BEALE_C, powers)]

    def loss(self, w, batch=None) -> float:
        x, y = self._check_dim(w)
        return float(sum(r * r for r, _ in self._residuals(x, y)))

    def grad(self, w, batch=None) -> np.ndarray:
        x, y = self._check_dim(w)
        gx = 0.0
        gy = 0.0
        for k, (r, p) in enumerate(self._residuals(x, y), start=1):
            gx += 2.0 * r * (p - 1.0)
            gy += 2.0 * r * (k * x * y ** (k - 1))
        return np.array([gx, gy])

    def hessian(self, w) -> np.ndarray:
        x, y = self._check_dim(w)
        h = np.zeros((2, 2))
        for k, (r, p) in enumerate(self._residuals(x, y), start=1):
            rx = p - 1.0
            ry = k * x * y ** (k - 1)
            rxy = k * y ** (k - 1)
            ryy = k * (k - 1) * x * (y ** (k - 2) if k >= 2 else 0.0)
            h[0, 0] += 2.0 * rx * rx
            h[0, 1] += 2.0 * (rx * ry + r * rxy)
            h[1, 1] += 2.0 * (ry * ry + r * ryy)
        h[1, 0] = h[0, 1]
        return h

    def hvp(self, w, v, batch=None) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.hessian(w) @ v


class SmoothedBukin(Objective):
    """L(x, y) = sqrt(sqrt((y - 0.01 x)^2 + eps) + eps).

    A doubly softened absolute value of u = y - 0.01 x: a long narrow valley
    along y = 0.01 x where the objective is constant, with curvature that
    sharpens as eps shrinks.
    """

    dim = 2
    _Q = np.array([-0.01, 1.0])  # gradient of u(x, y)

    def __init__(self, eps: float = 1e-3):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)

    def _chain(self, w):
        x, y = self._check_dim(w)
        u = y - 0.01 * x
        s = np.sqrt(u * u + self.eps)
        t = np.sqrt(s + self.eps)
        # dL/du and d2L/du2 via the scalar chain L = t(s(u))
        l1 = u / (2.0 * s * t)
        ds = u / s
        dst = ds * t + s * ds / (2.0 * t)
        l2 = 1.0 / (2.0 * s * t) - u * dst / (2.0 * s * s * t * t)
        return t, l1, l2

    def loss(self, w, batch=None) -> float:
        t, _, _ = self._chain(w)
        return float(t)

    def grad(self, w, batch=None) -> np.ndarray:
        _, l1, _ = self._chain(w)
        return l1 * self._Q

    def hvp(self, w, v, batch=None) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        _, _, l2 = self._chain(w)
        return l2 * np.dot(self._Q, v) * self._Q


def _act_tanh(z):
    a = np.tanh(z)
    d1 = 1.0 - a * a
    return a, d1, -2.0 * a * d1


def _act_softplus(z):
    a = np.logaddexp(0.0, z)
    d1 = 0.5 * (1.0 + np.tanh(0.5 * z))  # sigmoid, stable at both tails
    return a, d1, d1 * (1.0 - d1)


def _act_relu(z):
    d1 = (z > 0).astype(np.float64)
    return z * d1, d1, np.zeros_like(z)


ACTIVATIONS = {"tanh": _act_tanh, "softplus": _act_softplus, "relu": _act_relu}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a feed-forward classifier.

    layer_sizes runs input -> hidden... -> classes. init_scale multiplies the
    default per-layer uniform bound 1/sqrt(fan_in); weight_decay is the ridge
    coefficient applied by the training objective.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    init_scale: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum((sizes[l] + 1) * sizes[l + 1] for l in range(len(sizes) - 1))


class Mlp(Objective):
    """Feed-forward network with softmax cross-entropy loss.

    task "train" adds 0.5 * weight_decay * ||w||^2; task "validation" is the
    plain cross-entropy used as the outer objective. grad is reverse
    accumulation; hvp is an exact forward-over-reverse sweep (a tangent pass
    threaded through the gradient computation), not a finite difference.
    Weight layout per layer: row-major (fan_in, fan_out) matrix, then biases.
    """

    def __init__(self, spec: MlpSpec, task: str = "train"):
        if task not in ("train", "validation"):
            raise ValueError(f"task must be 'train' or 'validation', got {task!r}")
        self.spec = spec
        self.task = task
        self.dim = spec.param_count
        self._act = ACTIVATIONS[spec.activation]
        self._wd = spec.weight_decay if task == "train" else 0.0
        # Precompute flat-vector slices: (weight view shape, bias offset) per layer.
        self._slices = []
        off = 0
        sizes = spec.layer_sizes
        for l in range(len(sizes) - 1):
            fi, fo = sizes[l], sizes[l + 1]
            self._slices.append((off, off + fi * fo, off + fi * fo + fo, (fi, fo)))
            off = self._slices[-1][2]

    def init_weights(self, rng: RngStream) -> np.ndarray:
        gen = rng.generator()
        w = np.zeros(self.dim)
        for (w0, w1, _, (fi, _)) in self._slices:
            bound = self.spec.init_scale / np.sqrt(fi)
            w[w0:w1] = gen.uniform(-bound, bound, size=w1 - w0)
        return w

    def _layers(self, w: np.ndarray):
        return [
            (w[w0:w1].reshape(shape), w[w1:b1])
            for (w0, w1, b1, shape) in self._slices
        ]

    def _require_batch(self, batch: Batch | None) -> Batch:
        if batch is None:
            raise ValueError("network objectives need a batch of examples")
        return batch

    def _forward(self, layers, x):
        # Returns hidden (z, a, d1, d2) per layer and the final logits.
        acts = []
        a = x
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            if i < len(layers) - 1:
                a, d1, d2 = self._act(z)
                acts.append((a, d1, d2))
            else:
                logits = z
        return acts, logits

    @staticmethod
    def _softmax_stats(logits, y):
        m = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - m)
        denom = ex.sum(axis=1, keepdims=True)
        p = ex / denom
        log_denom = np.log(denom) + m
        nll = log_denom[:, 0] - logits[np.arange(y.size), y]
        return p, float(nll.mean())

    def loss(self, w, batch=None) -> float:
        batch = self._require_batch(batch)
        w = self._check_dim(w)
        _, logits = self._forward(self._layers(w), batch.x)
        _, ce = self._softmax_stats(logits, batch.y)
        if self._wd:
            ce += 0.5 * self._wd * float(np.dot(w, w))
        return ce

    def loss_and_grad(self, w, batch=None) -> tuple[float, np.ndarray]:
        batch = self._require_batch(batch)
        w = self._check_dim(w)
        layers = self._layers(w)
        acts, logits = self._forward(layers, batch.x)
        p, ce = self._softmax_stats(logits, batch.y)
        n = batch.y.size
        delta = p.copy()
        delta[np.arange(n), batch.y] -= 1.0
        delta /= n
        out = np.empty(self.dim)
        # Walk layers in reverse, filling the flat gradient in place.
        for i in range(len(layers) - 1, -1, -1):
            w0, w1, b1, shape = self._slices[i]
            a_in = batch.x if i == 0 else acts[i - 1][0]
            out[w0:w1] = (a_in.T @ delta).ravel()
            out[w1:b1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ layers[i][0].T) * acts[i - 1][1]
        if self._wd:
            out += self._wd * w
            ce += 0.5 * self._wd * float(np.dot(w, w))
        return ce, out

    def grad(self, w, batch=None) -> np.ndarray:
        return self.loss_and_grad(w, batch)[1]

    def hvp(self, w, v, batch=None) -> np.ndarray:
        batch = self._require_batch(batch)
        w = self._check_dim(w)
        v = self._check_dim(np.asarray(v, dtype=np.float64))
        layers = self._layers(w)
        tangents = self._layers(v)
        x, y = batch.x, batch.y
        n = y.size

        # Primal forward with activation derivatives.
        acts, logits = self._forward(layers, x)
        p, _ = self._softmax_stats(logits, y)

        # Tangent forward: Ra tracks the directional derivative of activations.
        ra = np.zeros_like(x)
        r_pre = []
        a_prev = x
        for i, ((W, b), (VW, Vb)) in enumerate(zip(layers, tangents)):
            rz = ra @ W + a_prev @ VW + Vb
            if i < len(layers) - 1:
                a, d1, _ = acts[i]
                r_pre.append(rz)
                ra = d1 * rz
                a_prev = a
            else:
                r_logits = rz

        # Primal backward and tangent backward, interleaved per layer.
        delta = p.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        r_delta = p * (r_logits - (p * r_logits).sum(axis=1, keepdims=True)) / n

        out = np.empty(self.dim)
        for i in range(len(layers) - 1, -1, -1):
            w0, w1, b1, shape = self._slices[i]
            a_in = x if i == 0 else acts[i - 1][0]
            r_a_in = np.zeros_like(x) if i == 0 else acts[i - 1][1] * r_pre[i - 1]
            out[w0:w1] = (r_a_in.T @ delta + a_in.T @ r_delta).ravel()
            out[w1:b1] = r_delta.sum(axis=0)
            if i > 0:
                W, _ = layers[i]
                VW, _ = tangents[i]
                back = delta @ W.T
                r_back = r_delta @ W.T + delta @ VW.T
                _, d1, d2 = acts[i - 1]
                r_delta = r_back * d1 + back * d2 * r_pre[i - 1]
                delta = back * d1
        if self._wd:
            out += self._wd * v
        return out

    def predict_logits(self, w, x) -> np.ndarray:
        w = self._check_dim(w)
        _, logits = self._forward(self._layers(w), x)
        return logits

    def accuracy(self, w, batch: Batch) -> float:
        logits = self.predict_logits(w, batch.x)
        return float((logits.argmax(axis=1) == batch.y).mean())

    def metrics(self, w, batch: Batch) -> tuple[float, float]:
        """Cross-entropy and accuracy from a single forward pass (no penalty)."""
        logits = self.predict_logits(w, batch.x)
        _, ce = self._softmax_stats(logits, batch.y)
        acc = float((logits.argmax(axis=1) == batch.y).mean())
        return ce, acc


def mlp_objective(spec: MlpSpec, task: str = "train") -> Mlp:
    """Build the training or validation objective for one architecture."""
    return Mlp(spec, task)


def quadratic_objective(a_diag) -> Quadratic:
    return Quadratic(a_diag)


def beale_objective() -> Beale:
    return Beale()


def bukin_smoothed_objective(eps: float = 1e-3) -> SmoothedBukin:
    return SmoothedBukin(eps)


def fd_grad_oracle(obj: Objective, w: np.ndarray, batch: Batch | None = None,
                   h: float = 1e-6, coords=None) -> np.ndarray:
    """Central-difference gradient of obj.loss, for cross-checking obj.grad.

    coords restricts the probe to a subset of coordinates (returned array
    still has full length, zeros elsewhere).
    """
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros_like(w)
    probe = range(w.size) if coords is None else coords
    for i in probe:
        step = h * max(1.0, abs(w[i]))
        wp = w.copy()
        wp[i] += step
        wm = w.copy()
        wm[i] -= step
        out[i] = (obj.loss(wp, batch) - obj.loss(wm, batch)) / (2.0 * step)
    return out


def fd_hvp_oracle(obj: Objective, w: np.ndarray, v: np.ndarray,
                  batch: Batch | None = None, h: float = 1e-5) -> np.ndarray:
    """Central-difference directional derivative of obj.grad along v.

    The direction is normalized before differencing so the step stays well
    scaled, then the result is rescaled by ||v||.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    u = v / norm
    gp = obj.grad(w + h * u, batch)
    gm = obj.grad(w - h * u, batch)
    return norm * (gp - gm) / (2.0 * h)
