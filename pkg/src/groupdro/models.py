"""Small classifiers with hand-derived cross-entropy gradients.

Parameters live in one flat float64 vector. Layouts:

* ``logistic``: ``[w (d), b]``
* ``softmax``: ``K`` rows of ``[w_k (d), b_k]``
* ``mlp1``: ``H`` rows of ``[w_h (d), b_h]`` followed by ``K`` rows of
  ``[v_k (H), c_k]``; ReLU hidden layer, subgradient 0 at the kink.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from groupdro.core import Example
from groupdro.errors import InvalidArgument

KINDS = ("logistic", "softmax", "mlp1")


@dataclass(frozen=True)
class Arch:
    kind: str
    d: int
    K: int = 2
    H: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown architecture {self.kind!r}")
        if self.d < 1:
            raise InvalidArgument("d must be >= 1")
        if self.kind == "logistic" and self.K != 2:
            raise InvalidArgument("logistic is binary (K=2)")
        if self.K < 2:
            raise InvalidArgument("K must be >= 2")
        if self.kind == "mlp1" and self.H < 1:
            raise InvalidArgument("mlp1 needs H >= 1")

    @classmethod
    def logistic(cls, d):
        return cls("logistic", d)

    @classmethod
    def softmax(cls, d, K):
        return cls("softmax", d, K)

    @classmethod
    def mlp1(cls, d, H, K=2):
        return cls("mlp1", d, K, H)

    @property
    def n_params(self) -> int:
        if self.kind == "logistic":
            return self.d + 1
        if self.kind == "softmax":
            return self.K * (self.d + 1)
        return self.H * (self.d + 1) + self.K * (self.H + 1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d, "K": self.K}
        if self.kind == "mlp1":
            out["H"] = self.H
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Arch":
        try:
            return cls(data["kind"], int(data["d"]), int(data.get("K", 2)), int(data.get("H", 0)))
        except KeyError as exc:
            raise InvalidArgument(f"architecture missing field {exc.args[0]!r}") from None

    def __str__(self):
        if self.kind == "logistic":
            return f"logistic-binary{{{self.d}}}"
        if self.kind == "softmax":
            return f"softmax{{{self.d},{self.K}}}"
        return f"mlp1{{{self.d},{self.H},{self.K}}}"


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray
    arch: Arch

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True).reshape(-1)
        if theta.size != self.arch.n_params:
            raise InvalidArgument(
                f"theta has {theta.size} entries, {self.arch} needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(theta)):
            raise InvalidArgument("theta must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def to_json(self) -> str:
        # repr() of a float64 is the shortest string that round-trips exactly
        body = ", ".join(repr(float(t)) for t in self.theta)
        return f'{{"arch": {json.dumps(self.arch.to_dict())}, "theta": [{body}]}}'

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        data = json.loads(text)
        return cls(np.array(data["theta"], dtype=np.float64), Arch.from_dict(data["arch"]))


def _trusted(theta: np.ndarray, arch: Arch) -> ModelParams:
    # hot-loop constructor: no copy, no validation
    params = object.__new__(ModelParams)
    object.__setattr__(params, "theta", theta)
    object.__setattr__(params, "arch", arch)
    return params


def init_params(arch: Arch, seed: int = 0) -> ModelParams:
    """Zeros for the convex models; fan-in uniform init for ``mlp1``."""
    if arch.kind != "mlp1":
        return ModelParams(np.zeros(arch.n_params), arch)
    rng = np.random.default_rng(seed)
    b1 = 1.0 / np.sqrt(arch.d)
    b2 = 1.0 / np.sqrt(arch.H)
    first = rng.uniform(-b1, b1, size=arch.H * (arch.d + 1))
    second = rng.uniform(-b2, b2, size=arch.K * (arch.H + 1))
    return ModelParams(np.concatenate([first, second]), arch)


def _split_mlp(theta, arch):
    cut = arch.H * (arch.d + 1)
    W1 = theta[:cut].reshape(arch.H, arch.d + 1)
    W2 = theta[cut:].reshape(arch.K, arch.H + 1)
    return W1, W2


def _check_X(arch, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != arch.d:
        raise InvalidArgument(f"feature dimension {X.shape[1]} does not match {arch}")
    return X


def logits(params: ModelParams, X) -> np.ndarray:
    """Per-example scores: shape (n,) for logistic, (n, K) otherwise."""
    arch, theta = params.arch, params.theta
    X = _check_X(arch, X)
    if arch.kind == "logistic":
        return X @ theta[:-1] + theta[-1]
    if arch.kind == "softmax":
        W = theta.reshape(arch.K, arch.d + 1)
        return X @ W[:, :-1].T + W[:, -1]
    W1, W2 = _split_mlp(theta, arch)
    hidden = np.maximum(X @ W1[:, :-1].T + W1[:, -1], 0.0)
    return hidden @ W2[:, :-1].T + W2[:, -1]


def batch_loss(params: ModelParams, X, y) -> np.ndarray:
    """Cross-entropy of each row, log-sum-exp stabilized."""
    z = logits(params, X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if params.arch.kind == "logistic":
        return np.logaddexp(0.0, z) - y * z
    return logsumexp(z, axis=1) - z[np.arange(z.shape[0]), y]


def batch_grad(params: ModelParams, X, y, weights=None) -> np.ndarray:
    """Sum over rows of ``weights[i] * grad loss_i``; unit weights by default."""
    _, backward = loss_and_backward(params, X, y)
    return backward(weights)


def loss_and_backward(params: ModelParams, X, y):
    """Per-row losses plus a closure mapping row weights to the weighted gradient.

    Lets a caller pick the row weights after seeing the losses while paying
    for a single forward pass.
    """
    arch, theta = params.arch, params.theta
    X = _check_X(arch, X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n = X.shape[0]
    Xb = np.hstack([X, np.ones((n, 1))])
    rows = np.arange(n)

    def _weights(weights):
        return np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)

    if arch.kind == "logistic":
        z = Xb @ theta
        losses = np.logaddexp(0.0, z) - y * z
        resid = expit(z) - y

        def backward(weights=None):
            return (resid * _weights(weights)) @ Xb

        return losses, backward

    if arch.kind == "softmax":
        W = theta.reshape(arch.K, arch.d + 1)
        z = Xb @ W.T
        losses = logsumexp(z, axis=1) - z[rows, y]
        resid = softmax(z, axis=1)
        resid[rows, y] -= 1.0

        def backward(weights=None):
            return ((resid * _weights(weights)[:, None]).T @ Xb).reshape(-1)

        return losses, backward

    W1, W2 = _split_mlp(theta, arch)
    pre = Xb @ W1.T
    Hb = np.hstack([np.maximum(pre, 0.0), np.ones((n, 1))])
    z = Hb @ W2.T
    losses = logsumexp(z, axis=1) - z[rows, y]
    resid = softmax(z, axis=1)
    resid[rows, y] -= 1.0

    def backward(weights=None):
        dz = resid * _weights(weights)[:, None]
        g2 = dz.T @ Hb
        dhidden = (dz @ W2[:, :-1]) * (pre > 0.0)
        g1 = dhidden.T @ Xb
        return np.concatenate([g1.reshape(-1), g2.reshape(-1)])

    return losses, backward


def batch_predict(params: ModelParams, X) -> np.ndarray:
    z = logits(params, X)
    if params.arch.kind == "logistic":
        return (z > 0.0).astype(np.int64)
    return np.argmax(z, axis=1)


def _unpack(params, example):
    if isinstance(example, Example):
        return example.features, example.label
    x, y = example
    return x, y


def loss(params: ModelParams, example) -> float:
    """-log p(y | x) for a single example (``Example`` or ``(x, y)``)."""
    x, y = _unpack(params, example)
    return float(batch_loss(params, np.atleast_2d(x), [y])[0])


def grad(params: ModelParams, example) -> np.ndarray:
    x, y = _unpack(params, example)
    return batch_grad(params, np.atleast_2d(x), [y])


def predict(params: ModelParams, features) -> int:
    """Most probable class; ties go to the smaller index."""
    return int(batch_predict(params, np.atleast_2d(features))[0])


def l2_norm_sq(params: ModelParams) -> float:
    theta = params.theta if isinstance(params, ModelParams) else np.asarray(params, dtype=np.float64)
    return float(np.dot(theta, theta))
