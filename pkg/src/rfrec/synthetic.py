"""Small planted instances for gradient, convergence and theory checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RatingsDataset, from_triples


@dataclass(frozen=True)
class PlantedInstance:
    data: RatingsDataset
    user_vecs: np.ndarray
    item_mat: np.ndarray


def planted_instance(
    n: int = 4,
    m: int = 6,
    d: int = 2,
    *,
    scale: float = 0.5,
    noise: float = 0.0,
    density: float = 1.0,
    seed: int = 0,
) -> PlantedInstance:
    """Ratings ``u_i . v_j (+ Gaussian noise)`` from a planted rank-``d`` model.

    With ``density < 1`` every user keeps at least one rating and every item at
    least ``min(d, n)`` raters, so no item column is left unconstrained.
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, scale, (n, d))
    V = rng.normal(0.0, scale, (d, m))
    R = U @ V
    if noise:
        R = R + noise * rng.normal(size=R.shape)
    mask = rng.random((n, m)) < density
    need = min(d, n)
    for j in range(m):
        missing = need - int(mask[:, j].sum())
        if missing > 0:
            free = np.flatnonzero(~mask[:, j])
            mask[rng.choice(free, missing, replace=False), j] = True
    for i in range(n):
        if not mask[i].any():
            mask[i, rng.integers(m)] = True
    users, items = np.nonzero(mask)
    triples = np.column_stack([users, items, R[users, items]])
    data = from_triples(triples, n, m, name=f"planted-n{n}-m{m}-d{d}-s{seed}")
    return PlantedInstance(data, U, V)


def random_point(n: int, m: int, d: int, rng: np.random.Generator, scale: float = 1.0):
    """A random ``(U, V)`` pair with ``V`` stacked per client."""
    return rng.normal(0.0, scale, (n, d)), rng.normal(0.0, scale, (n, d, m))


def random_desk_instance(seed: int, max_n: int = 5, max_m: int = 8, max_d: int = 4):
    """Random dimensions, sparse ratings and a random evaluation point."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    d = int(rng.integers(1, max_d + 1))
    inst = planted_instance(n, m, d, scale=1.0, noise=0.5, density=0.6, seed=seed)
    U, V = random_point(n, m, d, rng)
    return inst.data, U, V
