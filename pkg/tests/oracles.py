"""Independent reference implementations used as test oracles (plain numpy, no torch)."""

import itertools

import numpy as np


def dense_propagation(g, propagation="gcn"):
    n = g.num_nodes
    a = np.zeros((n, n))
    for i, j in g.edges:
        a[i, j] = a[j, i] = 1.0
    a += np.eye(n)
    if propagation == "sum":
        return a
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def dense_embed(arrays, num_layers, g, propagation="gcn"):
    ws, bs = arrays[:num_layers], arrays[num_layers:2 * num_layers]
    a = dense_propagation(g, propagation)
    h = g.node_features
    for w, b in zip(ws, bs):
        h = np.maximum(a @ h @ w + b, 0.0)
    return h.mean(axis=0)


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def dense_probs(arrays, num_layers, g, propagation="gcn"):
    z = dense_embed(arrays, num_layers, g, propagation)
    return softmax(z @ arrays[-2] + arrays[-1])


def dense_loss(arrays, num_layers, graphs, propagation="gcn"):
    return float(np.mean([-np.log(dense_probs(arrays, num_layers, g, propagation)[g.label]) for g in graphs]))


def finite_difference(f, arrays, step=1e-5):
    """Central differences of scalar f(arrays) with respect to every entry."""
    grads = []
    for k, a in enumerate(arrays):
        gk = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += step
            minus[k][idx] -= step
            gk[idx] = (f(plus) - f(minus)) / (2 * step)
        grads.append(gk)
    return grads


def brute_auroc(id_scores, ood_scores):
    wins = 0.0
    for o in ood_scores:
        for i in id_scores:
            wins += 1.0 if o > i else (0.5 if o == i else 0.0)
    return wins / (len(id_scores) * len(ood_scores))


def brute_triangles(g):
    edges = {(int(i), int(j)) for i, j in g.edges}
    return sum(1 for a, b, c in itertools.combinations(range(g.num_nodes), 3)
               if (a, b) in edges and (a, c) in edges and (b, c) in edges)


def entropy_direct(p):
    return float(-sum(x * np.log(x) for x in p if x > 0))
