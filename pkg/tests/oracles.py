"""Independent oracles shared by the test suite.

These stay deliberately dumb: brute force, enumeration, finite differences.
They never call the code paths they are checking.
"""

import itertools

import numpy as np


def fd_max_rel_err(loss_fn, arrays, n_coords, rng, h=1e-5):
    """Central finite differences vs analytic gradient on random coordinates.

    loss_fn() must be deterministic and read the arrays in place, returning
    (loss, grads) with grads keyed like `arrays`.
    """
    _, grads = loss_fn()
    worst = 0.0
    names = sorted(arrays)
    sizes = np.array([arrays[n].size for n in names], dtype=float)
    if sizes.sum() == 0:
        return 0.0
    probs = sizes / sizes.sum()
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=probs)]
        arr = arrays[name]
        flat_idx = int(rng.integers(arr.size))
        idx = np.unravel_index(flat_idx, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        plus, _ = loss_fn()
        arr[idx] = orig - h
        minus, _ = loss_fn()
        arr[idx] = orig
        numeric = (plus - minus) / (2 * h)
        analytic = grads[name][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2)
        worst = max(worst, err)
    return worst


def cosine(x, y):
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < 1e-12 or ny < 1e-12:
        return 0.0
    return float(x @ y / (nx * ny))


def enumerate_subset_expectation(probs, values_fn):
    """Sum over all subsets S of P(S) * values_fn(S); probs maps item -> p."""
    items = sorted(probs)
    total = 0.0
    for bits in itertools.product([0, 1], repeat=len(items)):
        subset = frozenset(i for i, b in zip(items, bits) if b)
        p = 1.0
        for i, b in zip(items, bits):
            p *= probs[i] if b else 1.0 - probs[i]
        total += p * values_fn(subset)
    return total


def exhaustive_best_paths(edges, src, mu):
    """All simple paths from src up to mu hops; yields (node, [edge_data,...])."""
    adj = {}
    for u, data, v in edges:
        adj.setdefault(u, []).append((data, v))
    out = []

    def walk(node, path, visited):
        if path:
            out.append((node, list(path)))
        if len(path) == mu:
            return
        for data, nxt in adj.get(node, []):
            if nxt in visited:
                continue
            path.append(data)
            walk(nxt, path, visited | {nxt})
            path.pop()

    walk(src, [], {src})
    return out
