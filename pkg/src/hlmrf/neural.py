"""Tiny differentiable heads mapping features to [0,1] observation slots.

Two kinds, both smooth so the learner's chain rule is exact: a one-layer
linear-sigmoid head, and a two-layer tanh MLP whose outputs pass through a
groupwise softmax (each group of slots sums to one, e.g. a per-node label
distribution). Weights live in a single flat array so the learner can treat
them like any other parameter vector; pack order is documented per kind.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

__all__ = ["HeadError", "DifferentiableHead", "linear_sigmoid_head",
           "mlp_softmax_head", "init_weights", "forward", "vjp",
           "head_to_dict", "head_from_dict"]

MAX_HIDDEN = 64

KIND_LINEAR = "linear-sigmoid"
KIND_MLP = "mlp-softmax"


class HeadError(ValueError):
    pass


@dataclass
class DifferentiableHead:
    kind: str
    n_in: int
    n_out: int
    hidden: int = 0                       # mlp-softmax only
    group_sizes: tuple = ()               # mlp-softmax only; sums to n_out
    w: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (KIND_LINEAR, KIND_MLP):
            raise HeadError(f"unknown head kind {self.kind!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise HeadError("head needs at least one input and one output")
        if self.kind == KIND_MLP:
            if not 1 <= self.hidden <= MAX_HIDDEN:
                raise HeadError(f"hidden size must be in [1, {MAX_HIDDEN}]")
            if not self.group_sizes:
                self.group_sizes = (self.n_out,)
            self.group_sizes = tuple(int(s) for s in self.group_sizes)
            if any(s < 1 for s in self.group_sizes) or \
                    sum(self.group_sizes) != self.n_out:
                raise HeadError("group sizes must be positive and sum to "
                                "the output count")
        elif self.hidden:
            raise HeadError("linear-sigmoid head takes no hidden layer")
        if self.w is not None:
            self.w = np.asarray(self.w, dtype=float)
            if self.w.shape != (self.n_params,):
                raise HeadError(f"weight vector must have {self.n_params} "
                                f"entries, got {self.w.shape}")

    @property
    def n_params(self) -> int:
        if self.kind == KIND_LINEAR:
            return self.n_out * (self.n_in + 1)
        return self.hidden * (self.n_in + 1) + self.n_out * (self.hidden + 1)

    # flat layout: [W, bias] for linear; [W1, b1, W2, b2] for the mlp
    def _unpack(self, w):
        if self.kind == KIND_LINEAR:
            k = self.n_out * self.n_in
            return w[:k].reshape(self.n_out, self.n_in), w[k:]
        h, ni, no = self.hidden, self.n_in, self.n_out
        i = 0
        W1 = w[i:i + h * ni].reshape(h, ni); i += h * ni
        b1 = w[i:i + h]; i += h
        W2 = w[i:i + no * h].reshape(no, h); i += no * h
        b2 = w[i:i + no]
        return W1, b1, W2, b2


def linear_sigmoid_head(n_in: int, n_out: int, *,
                        seed: int = 0) -> DifferentiableHead:
    head = DifferentiableHead(kind=KIND_LINEAR, n_in=n_in, n_out=n_out)
    head.w = init_weights(head, seed)
    return head


def mlp_softmax_head(n_in: int, hidden: int, group_sizes, *,
                     seed: int = 0) -> DifferentiableHead:
    sizes = tuple(int(s) for s in group_sizes)
    head = DifferentiableHead(kind=KIND_MLP, n_in=n_in, n_out=sum(sizes),
                              hidden=hidden, group_sizes=sizes)
    head.w = init_weights(head, seed)
    return head


def init_weights(head: DifferentiableHead, seed: int) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in) per layer, biases included."""
    rng = np.random.default_rng(seed)
    if head.kind == KIND_LINEAR:
        s = 1.0 / np.sqrt(head.n_in)
        return rng.uniform(-s, s, size=head.n_params)
    s1 = 1.0 / np.sqrt(head.n_in)
    s2 = 1.0 / np.sqrt(head.hidden)
    k1 = head.hidden * (head.n_in + 1)
    out = np.empty(head.n_params)
    out[:k1] = rng.uniform(-s1, s1, size=k1)
    out[k1:] = rng.uniform(-s2, s2, size=head.n_params - k1)
    return out


def _check_x(head, x_nn):
    x = np.asarray(x_nn, dtype=float).ravel()
    if x.shape != (head.n_in,):
        raise HeadError(f"expected {head.n_in} features, got {x.shape}")
    if head.w is None:
        raise HeadError("head has no weights; call init_weights first")
    return x


def forward(head: DifferentiableHead, x_nn, w=None) -> np.ndarray:
    """Evaluate g = head(x_nn) in [0,1]^n_out."""
    x = _check_x(head, x_nn)
    w = head.w if w is None else np.asarray(w, dtype=float)
    if head.kind == KIND_LINEAR:
        W, bias = head._unpack(w)
        return expit(W @ x + bias)
    W1, b1, W2, b2 = head._unpack(w)
    hid = np.tanh(W1 @ x + b1)
    z = W2 @ hid + b2
    out = np.empty(head.n_out)
    i = 0
    for s in head.group_sizes:
        out[i:i + s] = softmax(z[i:i + s])
        i += s
    return out


def vjp(head: DifferentiableHead, x_nn, u, w=None) -> np.ndarray:
    """Gradient over the flat weights of u . forward(head, x_nn)."""
    x = _check_x(head, x_nn)
    u = np.asarray(u, dtype=float).ravel()
    if u.shape != (head.n_out,):
        raise HeadError(f"cotangent needs {head.n_out} entries, got {u.shape}")
    w = head.w if w is None else np.asarray(w, dtype=float)
    if head.kind == KIND_LINEAR:
        W, bias = head._unpack(w)
        g = expit(W @ x + bias)
        dz = u * g * (1.0 - g)
        return np.concatenate([np.outer(dz, x).ravel(), dz])
    W1, b1, W2, b2 = head._unpack(w)
    hid = np.tanh(W1 @ x + b1)
    z = W2 @ hid + b2
    dz2 = np.empty(head.n_out)
    i = 0
    for s in head.group_sizes:
        p = softmax(z[i:i + s])
        us = u[i:i + s]
        dz2[i:i + s] = p * (us - us @ p)
        i += s
    dh = W2.T @ dz2
    dz1 = dh * (1.0 - hid * hid)
    return np.concatenate([np.outer(dz1, x).ravel(), dz1,
                           np.outer(dz2, hid).ravel(), dz2])


def head_to_dict(head: DifferentiableHead) -> dict:
    d = {"kind": head.kind, "n_in": head.n_in, "n_out": head.n_out,
         "w": None if head.w is None else head.w.tolist()}
    if head.kind == KIND_MLP:
        d["hidden"] = head.hidden
        d["group_sizes"] = list(head.group_sizes)
    return d


def head_from_dict(d: dict) -> DifferentiableHead:
    head = DifferentiableHead(
        kind=d["kind"], n_in=int(d["n_in"]), n_out=int(d["n_out"]),
        hidden=int(d.get("hidden", 0)),
        group_sizes=tuple(d.get("group_sizes", ())))
    if d.get("w") is not None:
        head.w = np.asarray(d["w"], dtype=float)
        if head.w.shape != (head.n_params,):
            raise HeadError("serialized weight vector has the wrong length")
    return head
