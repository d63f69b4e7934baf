"""Optimizer update maps with exact derivatives.

Each dynamics object is a smooth map Phi(s, eta) on an augmented state
(weights plus optimizer buffers) and exposes:

  step    next state at learning rate eta
  jvp     state Jacobian of Phi applied to a tangent vector
  vjp     transpose of that Jacobian applied to an adjoint vector
  lr_col  derivative of Phi with respect to eta (a single tangent column)

All second-order information enters through the objective's Hessian-vector
product; nothing here forms a matrix. A precomputed mini-batch gradient can
be passed as g to every method to avoid recomputing it within one step.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import Batch
from .problems import Objective


class DivergenceError(RuntimeError):
    """A trajectory produced a non-finite quantity."""

    def __init__(self, message: str, step: int | None = None,
                 last_finite_step: int | None = None):
        super().__init__(message)
        self.step = step
        self.last_finite_step = last_finite_step


@dataclass
class OptimizerState:
    """Weights plus optimizer buffers; step counts completed updates."""

    w: np.ndarray
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def state_dim(self) -> int:
        return self.w.size + sum(b.size for b in self.buffers.values())

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.w.copy(), {k: b.copy() for k, b in self.buffers.items()},
                              self.step)

    def perturbed(self, z: "Tangent", h: float) -> "OptimizerState":
        """State displaced by h * z; used by finite-difference checks."""
        return OptimizerState(self.w + h * z.w,
                              {k: self.buffers[k] + h * z.buffers[k] for k in self.buffers},
                              self.step)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w))
                    and all(np.all(np.isfinite(b)) for b in self.buffers.values()))


@dataclass
class Tangent:
    """Direction in augmented state space, mirroring an OptimizerState layout."""

    w: np.ndarray
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def zeros_like(state: OptimizerState) -> "Tangent":
        return Tangent(np.zeros_like(state.w),
                       {k: np.zeros_like(b) for k, b in state.buffers.items()})

    def copy(self) -> "Tangent":
        return Tangent(self.w.copy(), {k: b.copy() for k, b in self.buffers.items()})

    def __add__(self, other: "Tangent") -> "Tangent":
        return Tangent(self.w + other.w,
                       {k: self.buffers[k] + other.buffers[k] for k in self.buffers})

    def __mul__(self, c: float) -> "Tangent":
        return Tangent(c * self.w, {k: c * b for k, b in self.buffers.items()})

    __rmul__ = __mul__

    def dot(self, other: "Tangent") -> float:
        total = float(np.dot(self.w, other.w))
        for k in self.buffers:
            total += float(np.dot(self.buffers[k], other.buffers[k]))
        return total

    def dot_w(self, vec: np.ndarray) -> float:
        """Inner product of the weight block with a plain vector."""
        return float(np.dot(self.w, vec))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def is_zero(self) -> bool:
        return not self.w.any() and not any(b.any() for b in self.buffers.values())


class Dynamics:
    """Base class; concrete optimizers fill in the four derivatives."""

    objective: Objective

    def with_objective(self, objective: Objective) -> "Dynamics":
        out = copy.copy(self)
        out.objective = objective
        return out

    def init_state(self, w0: np.ndarray) -> OptimizerState:
        raise NotImplementedError

    def _grad(self, s: OptimizerState, batch: Batch | None, g: np.ndarray | None) -> np.ndarray:
        return self.objective.grad(s.w, batch) if g is None else g

    def step(self, s: OptimizerState, eta: float, batch: Batch | None = None,
             g: np.ndarray | None = None) -> OptimizerState:
        raise NotImplementedError

    def jvp(self, s: OptimizerState, eta: float, batch: Batch | None,
            z: Tangent, g: np.ndarray | None = None) -> Tangent:
        raise NotImplementedError

    def vjp(self, s: OptimizerState, eta: float, batch: Batch | None,
            u: Tangent, g: np.ndarray | None = None) -> Tangent:
        raise NotImplementedError

    def lr_col(self, s: OptimizerState, eta: float, batch: Batch | None = None,
               g: np.ndarray | None = None) -> Tangent:
        raise NotImplementedError


class Sgd(Dynamics):
    """w' = w - eta * g. The state Jacobian is I - eta * H (symmetric
    unless the objective masks it, hence vjp goes through hvp_t)."""

    def __init__(self, objective: Objective):
        self.objective = objective

    def init_state(self, w0) -> OptimizerState:
        return OptimizerState(np.array(w0, dtype=np.float64).ravel())

    def step(self, s, eta, batch=None, g=None) -> OptimizerState:
        g = self._grad(s, batch, g)
        return OptimizerState(s.w - eta * g, {}, s.step + 1)

    def jvp(self, s, eta, batch, z, g=None) -> Tangent:
        return Tangent(z.w - eta * self.objective.hvp(s.w, z.w, batch))

    def vjp(self, s, eta, batch, u, g=None) -> Tangent:
        return Tangent(u.w - eta * self.objective.hvp_t(s.w, u.w, batch))

    def lr_col(self, s, eta, batch=None, g=None) -> Tangent:
        return Tangent(-self._grad(s, batch, g))


class Sgdm(Dynamics):
    """Heavy-ball momentum: v' = rho v + g, w' = w - eta v'."""

    def __init__(self, objective: Objective, rho: float = 0.9):
        if not 0.0 <= rho < 1.0:
            raise ValueError("momentum rho must lie in [0, 1)")
        self.objective = objective
        self.rho = float(rho)

    def init_state(self, w0) -> OptimizerState:
        w = np.array(w0, dtype=np.float64).ravel()
        return OptimizerState(w, {"v": np.zeros_like(w)})

    def step(self, s, eta, batch=None, g=None) -> OptimizerState:
        g = self._grad(s, batch, g)
        v_new = self.rho * s.buffers["v"] + g
        return OptimizerState(s.w - eta * v_new, {"v": v_new}, s.step + 1)

    def jvp(self, s, eta, batch, z, g=None) -> Tangent:
        hz = self.objective.hvp(s.w, z.w, batch)
        zv = self.rho * z.buffers["v"] + hz
        return Tangent(z.w - eta * zv, {"v": zv})

    def vjp(self, s, eta, batch, u, g=None) -> Tangent:
        # Transpose blocks: r_w = u_w + H^T (u_v - eta u_w), r_v = rho (u_v - eta u_w).
        mix = u.buffers["v"] - eta * u.w
        return Tangent(u.w + self.objective.hvp_t(s.w, mix, batch),
                       {"v": self.rho * mix})

    def lr_col(self, s, eta, batch=None, g=None) -> Tangent:
        g = self._grad(s, batch, g)
        v_new = self.rho * s.buffers["v"] + g
        return Tangent(-v_new, {"v": np.zeros_like(v_new)})


class Adam(Dynamics):
    """Adam with bias correction; moments are part of the differentiated state.

    The step counter is treated as a constant of each step, so the bias
    corrections contribute no derivative terms. Where the second moment is
    exactly zero the curvature of sqrt is taken as zero (measure-zero set).
    """

    def __init__(self, objective: Objective, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.objective = objective
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def init_state(self, w0) -> OptimizerState:
        w = np.array(w0, dtype=np.float64).ravel()
        return OptimizerState(w, {"m": np.zeros_like(w), "v": np.zeros_like(w)})

    def _moments(self, s, g):
        t = s.step + 1
        m_new = self.beta1 * s.buffers["m"] + (1.0 - self.beta1) * g
        v_new = self.beta2 * s.buffers["v"] + (1.0 - self.beta2) * g * g
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        mhat = m_new / c1
        root = np.sqrt(v_new / c2)
        denom = root + self.eps
        return m_new, v_new, c1, c2, mhat, root, denom

    def step(self, s, eta, batch=None, g=None) -> OptimizerState:
        g = self._grad(s, batch, g)
        m_new, v_new, _, _, mhat, _, denom = self._moments(s, g)
        return OptimizerState(s.w - eta * mhat / denom,
                              {"m": m_new, "v": v_new}, s.step + 1)

    def jvp(self, s, eta, batch, z, g=None) -> Tangent:
        g = self._grad(s, batch, g)
        hz = self.objective.hvp(s.w, z.w, batch)
        _, _, c1, c2, mhat, root, denom = self._moments(s, g)
        zm = self.beta1 * z.buffers["m"] + (1.0 - self.beta1) * hz
        zv = self.beta2 * z.buffers["v"] + 2.0 * (1.0 - self.beta2) * g * hz
        r_root = np.divide(zv / c2, 2.0 * root, out=np.zeros_like(zv),
                           where=root > 0.0)
        zw = z.w - eta * (zm / c1 / denom - mhat * r_root / denom ** 2)
        return Tangent(zw, {"m": zm, "v": zv})

    def vjp(self, s, eta, batch, u, g=None) -> Tangent:
        g = self._grad(s, batch, g)
        _, _, c1, c2, mhat, root, denom = self._moments(s, g)
        # Diagonal sensitivities of w' to the fresh moments.
        p_m = -eta / (c1 * denom)
        p_v = np.divide(eta * mhat / c2, 2.0 * root * denom ** 2,
                        out=np.zeros_like(mhat), where=root > 0.0)
        adj_m = p_m * u.w + u.buffers["m"]
        adj_v = p_v * u.w + u.buffers["v"]
        back = (1.0 - self.beta1) * adj_m + 2.0 * (1.0 - self.beta2) * g * adj_v
        return Tangent(u.w + self.objective.hvp_t(s.w, back, batch),
                       {"m": self.beta1 * adj_m, "v": self.beta2 * adj_v})

    def lr_col(self, s, eta, batch=None, g=None) -> Tangent:
        g = self._grad(s, batch, g)
        _, _, _, _, mhat, _, denom = self._moments(s, g)
        return Tangent(-mhat / denom,
                       {"m": np.zeros_like(g), "v": np.zeros_like(g)})


class ClippedObjective(Objective):
    """Wraps an objective with elementwise gradient clamping.

    The effective Hessian is diag(mask) @ H with mask = |g| < clip, which is
    not symmetric, so the transpose product is H @ diag(mask) and must be
    overridden rather than reusing hvp.
    """

    def __init__(self, inner: Objective, clip: float):
        if clip <= 0:
            raise ValueError("clip threshold must be positive")
        self.inner = inner
        self.clip = float(clip)
        self.dim = inner.dim

    def _mask(self, w, batch):
        return np.abs(self.inner.grad(w, batch)) < self.clip

    def loss(self, w, batch=None) -> float:
        return self.inner.loss(w, batch)

    def grad(self, w, batch=None) -> np.ndarray:
        return np.clip(self.inner.grad(w, batch), -self.clip, self.clip)

    def loss_and_grad(self, w, batch=None):
        value, g = self.inner.loss_and_grad(w, batch)
        return value, np.clip(g, -self.clip, self.clip)

    def hvp(self, w, v, batch=None) -> np.ndarray:
        return self._mask(w, batch) * self.inner.hvp(w, v, batch)

    def hvp_t(self, w, u, batch=None) -> np.ndarray:
        return self.inner.hvp_t(w, self._mask(w, batch) * u, batch)


def sgd_dynamics(objective: Objective) -> Sgd:
    return Sgd(objective)


def sgdm_dynamics(objective: Objective, rho: float = 0.9) -> Sgdm:
    return Sgdm(objective, rho)


def adam_dynamics(objective: Objective, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> Adam:
    return Adam(objective, beta1, beta2, eps)


def clipped_dynamics(inner: Dynamics, clip: float) -> Dynamics:
    """The same optimizer run on the gradient-clipped objective."""
    return inner.with_objective(ClippedObjective(inner.objective, clip))
