"""Reference implementations written independently of the package, used only by tests."""

import numpy as np


def merge_sort_ranking(items):
    """Stable top-down merge sort on (score descending, image_id ascending)."""
    items = list(items)
    if len(items) <= 1:
        return [iid for iid, _ in items]

    def before(a, b):
        if a[1] != b[1]:
            return a[1] > b[1]
        return a[0] <= b[0]

    def sort(xs):
        if len(xs) <= 1:
            return xs
        mid = len(xs) // 2
        left, right = sort(xs[:mid]), sort(xs[mid:])
        out, i, j = [], 0, 0
        while i < len(left) and j < len(right):
            if before(left[i], right[j]):
                out.append(left[i])
                i += 1
            else:
                out.append(right[j])
                j += 1
        return out + left[i:] + right[j:]

    return [iid for iid, _ in sort(items)]


def random_score_table(rng, size):
    """``size`` (id, score) pairs drawn from a small value set so ties are common."""
    ids = [f"im{j:05d}" for j in rng.permutation(size)]
    levels = max(2, size // 4)
    scores = rng.integers(0, levels, size=size) / levels
    return list(zip(ids, scores.tolist()))


def softmax_objective(W, b, X, y_idx, lam):
    """Mean cross-entropy plus lam/2 * ||W||^2, written with plain loops over rows."""
    total = 0.0
    for x, y in zip(X, y_idx):
        z = W @ x + b
        zmax = max(z)
        lse = zmax + np.log(sum(np.exp(v - zmax) for v in z))
        total += lse - z[y]
    return total / len(X) + 0.5 * lam * float(np.sum(W * W))


def central_difference_grad(f, params, h=1e-5):
    """Central finite differences of scalar ``f`` over every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def count_correct(pred, truth):
    n = 0
    for p, t in zip(pred, truth):
        if p == t:
            n += 1
    return n
