import warnings

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning


def farthest_point_init(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        i = int(np.argmax(d2))
        centers.append(X[i])
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return np.array(centers)


def kmeans(X, k, seed=0, n_restarts=8, max_iter=100):
    """Deterministic k-means with farthest-point seeding and restarts.

    Returns ``(centers, labels)``.  ``k`` is reduced to the number of
    distinct rows when the data cannot support more clusters.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n_distinct = len(np.unique(X, axis=0))
    k = max(1, min(k, n_distinct))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        init = farthest_point_init(X, k, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            km = KMeans(n_clusters=k, init=init, n_init=1, max_iter=max_iter, random_state=0)
            km.fit(X)
        if best is None or km.inertia_ < best.inertia_ - 1e-12:
            best = km
    order = np.lexsort(best.cluster_centers_.T[::-1])
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    return best.cluster_centers_[order], remap[best.labels_]
