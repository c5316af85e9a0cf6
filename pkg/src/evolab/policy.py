"""Two-hidden-layer tanh policies and value functions with analytic gradients.

Parameters are flat float64 vectors. The network is fixed to
``obs -> tanh(64) -> tanh(64) -> out`` and is differentiated by hand:
``_backward`` is reverse-mode, ``_jvp`` forward-mode. The Fisher-vector
product is ``J^T M J v`` where ``M`` is the Fisher matrix of the action
distribution in output space; at ``theta = theta_k`` this equals the Hessian
of the mean KL divergence.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

HIDDEN = (64, 64)
LOG_2PI = math.log(2.0 * math.pi)


def _orthogonal(rng, rows, cols, gain):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class MLP:
    """Shape bookkeeping and differentiation for the fixed tanh network."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = HIDDEN):
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        h1, h2 = hidden
        self.shapes = [(h1, self.in_dim), (h1,), (h2, h1), (h2,), (self.out_dim, h2), (self.out_dim,)]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.n_params = sum(self.sizes)

    def unpack(self, theta):
        out, k = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            out.append(theta[k:k + size].reshape(shape))
            k += size
        return out

    def init(self, rng, out_gain=0.01):
        parts = []
        for i, shape in enumerate(self.shapes):
            if len(shape) == 1:
                parts.append(np.zeros(shape))
            else:
                gain = out_gain if i == 4 else 1.0
                parts.append(_orthogonal(rng, shape[0], shape[1], gain))
        return np.concatenate([p.ravel() for p in parts])

    def forward(self, theta, x):
        w1, b1, w2, b2, w3, b3 = self.unpack(theta)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h1 = np.tanh(x @ w1.T + b1)
        h2 = np.tanh(h1 @ w2.T + b2)
        return h2 @ w3.T + b3, (x, h1, h2)

    def backward(self, theta, cache, dout):
        """Gradient w.r.t. the flat parameters given dL/d(output)."""
        _, _, w2, _, w3, _ = self.unpack(theta)
        x, h1, h2 = cache
        da2 = (dout @ w3) * (1.0 - h2 ** 2)
        da1 = (da2 @ w2) * (1.0 - h1 ** 2)
        return np.concatenate([
            (da1.T @ x).ravel(), da1.sum(0),
            (da2.T @ h1).ravel(), da2.sum(0),
            (dout.T @ h2).ravel(), dout.sum(0),
        ])

    def jvp(self, theta, cache, v):
        """Directional derivative of the outputs along parameter direction v."""
        _, _, w2, _, w3, _ = self.unpack(theta)
        v1, vb1, v2, vb2, v3, vb3 = self.unpack(v)
        x, h1, h2 = cache
        t1 = (x @ v1.T + vb1) * (1.0 - h1 ** 2)
        t2 = (t1 @ w2.T + h1 @ v2.T + vb2) * (1.0 - h2 ** 2)
        return t2 @ w3.T + h2 @ v3.T + vb3


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class CategoricalPolicy:
    kind = "categorical"

    def __init__(self, obs_dim: int, n_actions: int):
        self.obs_dim, self.n_actions = int(obs_dim), int(n_actions)
        self.net = MLP(obs_dim, n_actions)
        self.n_params = self.net.n_params

    def init_params(self, rng):
        return self.net.init(rng)

    def _check(self, theta):
        if theta.shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} parameters, got {theta.shape}")

    def log_probs_all(self, theta, states):
        z, _ = self.net.forward(theta, states)
        return _log_softmax(z)

    def log_prob(self, theta, states, actions):
        lp = self.log_probs_all(theta, states)
        a = np.asarray(actions, dtype=int).reshape(-1)
        return lp[np.arange(len(a)), a]

    def sample(self, theta, state, rng, clip=True):
        p = np.exp(self.log_probs_all(theta, state)[0])
        return int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"),
                       self.n_actions - 1))

    def sample_with_log_prob(self, theta, state, rng):
        lp = self.log_probs_all(theta, state)[0]
        p = np.exp(lp)
        a = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"),
                    self.n_actions - 1))
        return a, a, float(lp[a])

    def mode(self, theta, state):
        z, _ = self.net.forward(theta, state)
        return int(np.argmax(z[0]))

    def logp_grad(self, theta, states, actions, weights):
        """Gradient of sum_i weights_i * log pi(a_i|s_i)."""
        z, cache = self.net.forward(theta, states)
        p = np.exp(_log_softmax(z))
        a = np.asarray(actions, dtype=int).reshape(-1)
        dz = -p * weights[:, None]
        dz[np.arange(len(a)), a] += weights
        return self.net.backward(theta, cache, dz)

    def kl(self, theta, theta_k, states):
        lp = self.log_probs_all(theta, states)
        lq = self.log_probs_all(theta_k, states)
        return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)))

    def kl_grad(self, theta, theta_k, states):
        z, cache = self.net.forward(theta, states)
        lp = _log_softmax(z)
        lq = self.log_probs_all(theta_k, states)
        p = np.exp(lp)
        per = np.sum(p * (lp - lq), axis=1, keepdims=True)
        dz = p * (lp - lq - per) / len(z)
        return self.net.backward(theta, cache, dz)

    def fvp(self, theta_k, states, v):
        z, cache = self.net.forward(theta_k, states)
        p = np.exp(_log_softmax(z))
        t = self.net.jvp(theta_k, cache, v)
        mt = p * t - p * np.sum(p * t, axis=1, keepdims=True)
        return self.net.backward(theta_k, cache, mt / len(z))


class GaussianPolicy:
    """Diagonal Gaussian with a state-independent log standard deviation."""

    kind = "gaussian"

    def __init__(self, obs_dim: int, act_dim: int, low=-1.0, high=1.0,
                 init_log_std: float = math.log(0.5)):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.low = np.broadcast_to(np.asarray(low, dtype=float), (self.act_dim,)).copy()
        self.high = np.broadcast_to(np.asarray(high, dtype=float), (self.act_dim,)).copy()
        self.init_log_std = init_log_std
        self.net = MLP(obs_dim, act_dim)
        self.n_params = self.net.n_params + self.act_dim

    def init_params(self, rng):
        return np.concatenate([self.net.init(rng), np.full(self.act_dim, self.init_log_std)])

    def _split(self, theta):
        return theta[:self.net.n_params], theta[self.net.n_params:]

    def dist(self, theta, states):
        w, log_std = self._split(theta)
        mean, _ = self.net.forward(w, states)
        return mean, log_std

    def log_prob(self, theta, states, actions):
        mean, log_std = self.dist(theta, states)
        a = np.asarray(actions, dtype=float).reshape(mean.shape)
        zs = (a - mean) / np.exp(log_std)
        return np.sum(-0.5 * zs ** 2 - log_std - 0.5 * LOG_2PI, axis=1)

    def sample(self, theta, state, rng, clip=True):
        mean, log_std = self.dist(theta, state)
        a = mean[0] + np.exp(log_std) * rng.standard_normal(self.act_dim)
        return np.clip(a, self.low, self.high) if clip else a

    def sample_with_log_prob(self, theta, state, rng):
        """Raw sample (for log-prob bookkeeping), clipped env action, log-prob."""
        mean, log_std = self.dist(theta, state)
        eps = rng.standard_normal(self.act_dim)
        raw = mean[0] + np.exp(log_std) * eps
        lp = float(np.sum(-0.5 * eps ** 2 - log_std - 0.5 * LOG_2PI))
        return raw, np.clip(raw, self.low, self.high), lp

    def mode(self, theta, state):
        mean, _ = self.dist(theta, state)
        return np.clip(mean[0], self.low, self.high)

    def logp_grad(self, theta, states, actions, weights):
        w, log_std = self._split(theta)
        mean, cache = self.net.forward(w, states)
        a = np.asarray(actions, dtype=float).reshape(mean.shape)
        var = np.exp(2.0 * log_std)
        dmean = (a - mean) / var * weights[:, None]
        dlogstd = np.sum(((a - mean) ** 2 / var - 1.0) * weights[:, None], axis=0)
        return np.concatenate([self.net.backward(w, cache, dmean), dlogstd])

    def kl(self, theta, theta_k, states):
        m, s = self.dist(theta, states)
        mk, sk = self.dist(theta_k, states)
        per = np.sum(sk - s + (np.exp(2 * s) + (m - mk) ** 2) / (2 * np.exp(2 * sk)) - 0.5, axis=1)
        return float(np.mean(per))

    def kl_grad(self, theta, theta_k, states):
        w, s = self._split(theta)
        m, cache = self.net.forward(w, states)
        mk, sk = self.dist(theta_k, states)
        n = len(m)
        dm = (m - mk) / np.exp(2 * sk) / n
        ds = -1.0 + np.exp(2 * s) / np.exp(2 * sk)
        return np.concatenate([self.net.backward(w, cache, dm), ds])

    def fvp(self, theta_k, states, v):
        w, s = self._split(theta_k)
        vw, vs = self._split(v)
        _, cache = self.net.forward(w, states)
        t = self.net.jvp(w, cache, vw)
        mt = t / np.exp(2 * s) / len(t)
        return np.concatenate([self.net.backward(w, cache, mt), 2.0 * vs])


class ValueFunction:
    """Scalar-output tanh network fitted by mean-squared error."""

    def __init__(self, obs_dim: int):
        self.obs_dim = int(obs_dim)
        self.net = MLP(obs_dim, 1)
        self.n_params = self.net.n_params

    def init_params(self, rng):
        return self.net.init(rng, out_gain=1.0)

    def predict(self, params, states):
        out, _ = self.net.forward(params, states)
        return out[:, 0]

    def mse(self, params, states, targets):
        return float(np.mean((self.predict(params, states) - targets) ** 2))

    def mse_grad(self, params, states, targets):
        out, cache = self.net.forward(params, states)
        diff = out[:, 0] - np.asarray(targets, dtype=float)
        return self.net.backward(params, cache, (2.0 * diff / len(diff))[:, None])


Policy = CategoricalPolicy | GaussianPolicy


def policy_log_prob(policy: Policy, theta, state, action) -> float:
    return float(policy.log_prob(theta, np.atleast_2d(state), np.atleast_1d(action)
                                 if policy.kind == "categorical" else np.atleast_2d(action))[0])


def policy_sample(policy: Policy, theta, state, rng, clip=True):
    return policy.sample(theta, np.atleast_2d(state), rng, clip=clip)


@dataclass
class SurrogateBatch:
    """On-policy samples for the surrogate objectives.

    ``weights`` are nonnegative per-sample multiplicities (all ones for a
    plain on-policy average).
    """

    states: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    reward_advantages: np.ndarray
    cost_advantages: np.ndarray
    gamma: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.states))
        self.weights = np.asarray(self.weights, dtype=float)

    @classmethod
    def from_processed(cls, batch, weights=None):
        return cls(batch.states, batch.actions, batch.log_probs, batch.reward_advantages,
                   batch.cost_advantages, batch.gamma, weights)


def surrogate_values(policy: Policy, theta, batch: SurrogateBatch) -> tuple[float, float]:
    """Weighted means of ratio*A_R and ratio*A_C/(1-gamma)."""
    ratio = np.exp(policy.log_prob(theta, batch.states, batch.actions) - batch.log_probs_old)
    w = batch.weights / batch.weights.sum()
    return (float(np.sum(w * ratio * batch.reward_advantages)),
            float(np.sum(w * ratio * batch.cost_advantages)) / (1.0 - batch.gamma))


def surrogate_gradients(policy: Policy, theta, batch: SurrogateBatch) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the reward and cost surrogates at ``theta``.

    Uses d ratio = ratio * d log pi, so the result is exact at any theta,
    not only at the behaviour parameters.
    """
    ratio = np.exp(policy.log_prob(theta, batch.states, batch.actions) - batch.log_probs_old)
    w = batch.weights / batch.weights.sum()
    g = policy.logp_grad(theta, batch.states, batch.actions, w * ratio * batch.reward_advantages)
    g_c = policy.logp_grad(theta, batch.states, batch.actions, w * ratio * batch.cost_advantages)
    return g, g_c / (1.0 - batch.gamma)


def kl_divergence(policy: Policy, theta, theta_k, states) -> float:
    return policy.kl(theta, theta_k, np.atleast_2d(states))


def fisher_vector_product(policy: Policy, theta_k, states, v, damping: float = 0.1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (policy.n_params,):
        raise InvalidInputError(f"v must have shape ({policy.n_params},), got {v.shape}")
    return policy.fvp(theta_k, np.atleast_2d(states), v) + damping * v


def value_update(vf: ValueFunction, params, states, targets, lr: float = 1e-3,
                 iterations: int = 40, batch_size: int = 128,
                 rng: np.random.Generator | None = None, max_retries: int = 5):
    """Fit the value network with Adam over shuffled minibatches.

    Each iteration is one pass over the data. If the final full-batch MSE
    is worse than the initial one the learning rate is halved and the fit
    restarts from ``params``; after ``max_retries`` the input is returned.
    """
    if lr <= 0 or iterations < 1:
        raise InvalidInputError("need lr > 0 and iterations >= 1")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    targets = np.asarray(targets, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(states)
    start_mse = vf.mse(params, states, targets)
    for _ in range(max_retries + 1):
        p = params.copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        t = 0
        for _ in range(iterations):
            order = rng.permutation(n)
            for k in range(0, n, batch_size):
                idx = order[k:k + batch_size]
                g = vf.mse_grad(p, states[idx], targets[idx])
                t += 1
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                mhat = m / (1 - 0.9 ** t)
                vhat = v / (1 - 0.999 ** t)
                p = p - lr * mhat / (np.sqrt(vhat) + 1e-8)
        if vf.mse(p, states, targets) <= start_mse:
            return p
        lr *= 0.5
    return params.copy()


def make_policy(spec) -> Policy:
    if spec.action_kind == "discrete":
        return CategoricalPolicy(spec.observation_dim, spec.n_actions)
    return GaussianPolicy(spec.observation_dim, spec.action_dim, spec.action_low, spec.action_high)


_MAGIC = b"EVOCKPT1"


def save_checkpoint(path, params: np.ndarray, header: dict) -> None:
    """Write ``params`` as little-endian float64 after a JSON header."""
    params = np.ascontiguousarray(params, dtype="<f8")
    meta = dict(header, n_params=int(params.size))
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode())
    params = np.frombuffer(data[12 + hlen:], dtype="<f8").astype(float)
    if params.size != header["n_params"]:
        raise InvalidInputError("checkpoint truncated")
    return params, header
