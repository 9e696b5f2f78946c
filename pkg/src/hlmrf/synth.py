"""Deterministic synthetic instances for tests, demos and benchmarks.

Three shapes with complementary structure:

* collective-classification: one homophily graph with two planted
  communities; noisy per-node priors live in x_sy (partition 0) and edge
  smoothness potentials tie neighbors together (partition 1). The starting
  weights deliberately drown the priors in smoothness, so predictions start
  near-uniform and weight learning has real work to do. A handful of seed
  nodes carry training labels.
* chain: a single path with opposing pulls at the two ends; exactly one
  connected component, so it exercises the lock-free solver.
* many-components: k disjoint three-node chains, each with its own prior
  and a pairwise cap constraint; component-level parallelism applies
  directly.

Same seed, same instance — generation is pure numpy RNG with no ambient
state.
"""
from __future__ import annotations

import numpy as np

from .model import GroundedModel, HingePotential, HardConstraint
from .learn import TrainingSample

__all__ = ["collective_classification", "chain", "many_components",
           "generate", "KINDS"]

KINDS = ("collective-classification", "chain", "many-components")


def _smooth_pair(u: int, v: int, p: int = 2) -> list[HingePotential]:
    # both directions, so the pair penalizes |y_u - y_v|
    return [
        HingePotential(y={u: 1.0, v: -1.0}, x={}, g={}, b=0.0, p=p,
                       partition=1),
        HingePotential(y={v: 1.0, u: -1.0}, x={}, g={}, b=0.0, p=p,
                       partition=1),
    ]


def _prior_pair(v: int, x_index: int) -> list[HingePotential]:
    # |y_v - x[x_index]| via two squared hinges in partition 0
    return [
        HingePotential(y={v: 1.0}, x={x_index: -1.0}, g={}, b=0.0, p=2,
                       partition=0),
        HingePotential(y={v: -1.0}, x={x_index: 1.0}, g={}, b=0.0, p=2,
                       partition=0),
    ]


def collective_classification(seed: int, *, n_nodes: int = 20,
                              n_seeds: int = 5, p_in: float = 0.35,
                              p_out: float = 0.05, prior_noise: float = 0.15,
                              w_init=(0.05, 0.95)):
    """Two planted communities; returns (model, samples, info).

    info carries the ground-truth labels, the seed-node indices and the
    edge list. The single training sample labels only the seed nodes.
    """
    rng = np.random.default_rng(seed)
    half = n_nodes // 2
    truth = np.zeros(n_nodes)
    truth[half:] = 1.0
    priors = np.clip(truth + rng.normal(0.0, prior_noise, n_nodes)
                     - 0.5 * np.sign(truth - 0.5) * 0.2, 0.0, 1.0)
    pots = []
    for v in range(n_nodes):
        pots += _prior_pair(v, v)
    edges = []
    for u in range(n_nodes):
        for v in range(u + 1, n_nodes):
            same = (u < half) == (v < half)
            if rng.random() < (p_in if same else p_out):
                edges.append((u, v))
                pots += _smooth_pair(u, v)
    seeds = np.sort(rng.choice(n_nodes, size=n_seeds, replace=False))
    model = GroundedModel(n_y=n_nodes, x_sy=priors, n_g=0, r=2,
                          w_sy=np.asarray(w_init, dtype=float),
                          potentials=pots, constraints=[])
    model.validate()
    sample = TrainingSample(labels={int(v): float(truth[v]) for v in seeds})
    info = {"kind": "collective-classification", "truth": truth,
            "seeds": seeds, "edges": edges}
    return model, [sample], info


def chain(seed: int, *, n: int = 50, w_init=(0.5, 0.5)):
    """One path graph pulled toward 1 at the head and 0 at the tail."""
    rng = np.random.default_rng(seed)
    pots = [
        HingePotential(y={0: -1.0}, x={}, g={}, b=1.0, p=2, partition=0),
        HingePotential(y={n - 1: 1.0}, x={}, g={}, b=0.0, p=2, partition=0),
    ]
    for v in range(n - 1):
        pots += _smooth_pair(v, v + 1)
    # a few random weak priors keep the interior from being flat
    for v in rng.choice(np.arange(1, n - 1), size=max(n // 10, 1),
                        replace=False):
        t = float(rng.uniform(0.2, 0.8))
        pots.append(HingePotential(y={int(v): 1.0}, x={}, g={}, b=-t,
                                   p=1, partition=0))
    model = GroundedModel(n_y=n, x_sy=np.zeros(0), n_g=0, r=2,
                          w_sy=np.asarray(w_init, dtype=float),
                          potentials=pots, constraints=[])
    model.validate()
    sample = TrainingSample(labels={0: 1.0, n - 1: 0.0})
    info = {"kind": "chain", "truth": None, "ends": (1.0, 0.0)}
    return model, [sample], info


def many_components(seed: int, *, k: int = 8, nodes_per: int = 3,
                    w_init=(0.5, 0.5)):
    """k disjoint short chains, each with a private prior and a cap
    constraint on its first two nodes; connected_components finds exactly
    k groups."""
    rng = np.random.default_rng(seed)
    pots = []
    cons = []
    targets = np.where(rng.random(k) < 0.5, 0.1, 0.9)
    labels = {}
    for c in range(k):
        base = c * nodes_per
        pots += _prior_pair(base, c)
        for j in range(nodes_per - 1):
            pots += _smooth_pair(base + j, base + j + 1)
        cons.append(HardConstraint(y={base: 1.0, base + 1: 1.0}, x={}, g={},
                                   b=-1.5))
        labels[base] = float(targets[c])
    model = GroundedModel(n_y=k * nodes_per, x_sy=targets.astype(float),
                          n_g=0, r=2, w_sy=np.asarray(w_init, dtype=float),
                          potentials=pots, constraints=cons)
    model.validate()
    sample = TrainingSample(labels=labels)
    info = {"kind": "many-components", "truth": targets, "k": k}
    return model, [sample], info


def generate(kind: str, seed: int, *, size: int | None = None):
    """Dispatch by kind name; size maps to the kind's natural knob
    (node count, path length, component count)."""
    if kind == "collective-classification":
        kwargs = {} if size is None else {"n_nodes": int(size)}
        return collective_classification(seed, **kwargs)
    if kind == "chain":
        kwargs = {} if size is None else {"n": int(size)}
        return chain(seed, **kwargs)
    if kind == "many-components":
        kwargs = {} if size is None else {"k": int(size)}
        return many_components(seed, **kwargs)
    raise ValueError(f"unknown synthetic kind {kind!r}; "
                     f"expected one of {KINDS}")
