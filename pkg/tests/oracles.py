"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np

from hardmoe.neuralcore import MlpModel


def straight_line_forward(weights, biases, x):
    """Plain python-loop matrix chain, no numpy broadcasting tricks."""
    h = [float(v) for v in x]
    hidden = h
    L = len(weights)
    for l, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for r in range(W.shape[0]):
            s = float(b[r])
            for c in range(W.shape[1]):
                s += float(W[r, c]) * h[c]
            out.append(max(s, 0.0) if l < L - 1 else s)
        if l == L - 2:
            hidden = out
        h = out
    return np.array(h), np.array(hidden)


def loss_value(model: MlpModel, X, Y) -> float:
    z = X
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = z @ W.T + b
        if l < model.n_layers - 1:
            z = np.maximum(z, 0)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(Y * logp).sum() / X.shape[0])


def finite_difference_grads(model: MlpModel, X, Y, h=1e-4):
    """Central differences of ``loss_value`` w.r.t. every parameter."""
    out_w, out_b = [], []
    for group, out in ((model.weights, out_w), (model.biases, out_b)):
        for p in group:
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                up = loss_value(model, X, Y)
                p[idx] = orig - h
                down = loss_value(model, X, Y)
                p[idx] = orig
                g[idx] = (up - down) / (2 * h)
            out.append(g)
    return out_w, out_b


def grads_close(a, n, rel=1e-4, floor=1e-6) -> bool:
    return bool(np.all(np.abs(a - n) <= np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), floor)))


def brute_kmeans_1d(points, K):
    """Best within-cluster SSE over every K-partition of a small point set."""
    best = (np.inf, None)
    n = len(points)
    for labels in itertools.product(range(K), repeat=n):
        if len(set(labels)) != K:
            continue
        lab = np.array(labels)
        cents = [np.mean([points[i] for i in range(n) if lab[i] == k]) for k in range(K)]
        sse = sum((points[i] - cents[lab[i]]) ** 2 for i in range(n))
        if sse < best[0] - 1e-12:
            best = (sse, sorted(cents))
    return best


def brute_top_m(scores, m):
    """Indices of the m largest scores, lower index first on ties (insertion order)."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return set(order[:m])


def brute_p_at_m(score_rows, tag_lists, m):
    num = den = 0
    for s, tags in zip(score_rows, tag_lists):
        top = brute_top_m(list(s), m)
        num += sum(1 for t in tags if t in top)
        den += len(tags)
    return num / den


def brute_q_at_m(score_rows, tag_lists, m, n_tags):
    """Exact expectation of q@m: average over supported tags of the fraction
    of carrying images on which the tag is in the top m."""
    per_tag = []
    for t in range(n_tags):
        imgs = [i for i, tags in enumerate(tag_lists) if t in tags]
        if not imgs:
            continue
        per_tag.append(np.mean([t in brute_top_m(list(score_rows[i]), m) for i in imgs]))
    return float(np.mean(per_tag))
