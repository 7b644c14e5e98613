"""Array-backed decision trees shared by the forest and boosting models.

Trees are stored as flat parallel arrays (feature, threshold, left, right,
value) so a whole ensemble can be evaluated for a batch of rows with a
handful of numpy gathers per depth level instead of per-node Python loops.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class TreeNodes:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    value: np.ndarray      # (n_nodes, value_dim) float64
    depth: int

    @property
    def num_nodes(self):
        return self.feature.shape[0]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature=np.array(d["feature"], dtype=np.int32),
            threshold=np.array(d["threshold"], dtype=np.float64),
            left=np.array(d["left"], dtype=np.int32),
            right=np.array(d["right"], dtype=np.int32),
            value=np.array(d["value"], dtype=np.float64),
            depth=int(d["depth"]),
        )


class _Builder:
    def __init__(self, value_dim):
        self.feature, self.threshold = [], []
        self.left, self.right = [], []
        self.value = []
        self.value_dim = value_dim
        self.max_depth_seen = 0

    def add(self, depth):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(np.zeros(self.value_dim))
        self.max_depth_seen = max(self.max_depth_seen, depth)
        return len(self.feature) - 1

    def finish(self):
        return TreeNodes(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            value=np.array(self.value, dtype=np.float64),
            depth=self.max_depth_seen,
        )


def _split_candidates(sorted_vals, n, min_leaf):
    """Boolean mask over boundary positions i (split between i and i+1)."""
    valid = sorted_vals[:-1] < sorted_vals[1:]
    n_left = np.arange(1, n)
    valid &= (n_left >= min_leaf) & ((n - n_left) >= min_leaf)
    return valid


def build_classification_tree(X, y, num_classes, max_depth, min_leaf,
                              feature_subsample, rng):
    """Gini CART on class labels; leaves hold class distributions.

    feature_subsample features are drawn per split; deterministic for a
    fixed rng state (stable sorts, first-best tie-break in draw order).
    """
    n, d = X.shape
    builder = _Builder(num_classes)

    def grow(idx, depth):
        node = builder.add(depth)
        counts = np.bincount(y[idx], minlength=num_classes).astype(np.float64)
        builder.value[node] = counts / counts.sum()
        total = idx.size
        parent_gini = 1.0 - np.sum((counts / total) ** 2)
        if depth >= max_depth or total < 2 * min_leaf or parent_gini == 0.0:
            return node

        feats = rng.choice(d, size=min(feature_subsample, d), replace=False)
        best = None  # (weighted_gini, feature, threshold)
        for f in feats:
            vals = X[idx, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            valid = _split_candidates(sv, total, min_leaf)
            if not valid.any():
                continue
            onehot = np.zeros((total, num_classes))
            onehot[np.arange(total), y[idx][order]] = 1.0
            cum = np.cumsum(onehot, axis=0)[:-1]
            n_left = np.arange(1, total, dtype=np.float64)
            n_right = total - n_left
            left_g = 1.0 - np.sum((cum / n_left[:, None]) ** 2, axis=1)
            right_counts = counts - cum
            right_g = 1.0 - np.sum((right_counts / n_right[:, None]) ** 2, axis=1)
            weighted = (n_left * left_g + n_right * right_g) / total
            weighted[~valid] = np.inf
            pos = int(np.argmin(weighted))
            if weighted[pos] < parent_gini - 1e-12 and (
                    best is None or weighted[pos] < best[0]):
                best = (weighted[pos], int(f), (sv[pos] + sv[pos + 1]) / 2.0)

        if best is None:
            return node
        _, f, thr = best
        go_left = X[idx, f] <= thr
        builder.feature[node] = f
        builder.threshold[node] = thr
        builder.left[node] = grow(idx[go_left], depth + 1)
        builder.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(n), 0)
    return builder.finish()


def build_regression_tree(X, grad, hess, max_depth, min_leaf, lam=1e-6):
    """Second-order regression tree for boosting: splits maximise the usual
    G^2/(H+lam) gain, leaves carry the Newton step G/(H+lam)."""
    n, d = X.shape
    builder = _Builder(1)

    def grow(idx, depth):
        node = builder.add(depth)
        G, H = grad[idx].sum(), hess[idx].sum()
        builder.value[node][0] = G / (H + lam)
        total = idx.size
        if depth >= max_depth or total < 2 * min_leaf:
            return node

        parent_score = G * G / (H + lam)
        best = None  # (gain, feature, threshold)
        for f in range(d):
            vals = X[idx, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            valid = _split_candidates(sv, total, min_leaf)
            if not valid.any():
                continue
            gl = np.cumsum(grad[idx][order])[:-1]
            hl = np.cumsum(hess[idx][order])[:-1]
            gain = (gl ** 2 / (hl + lam)
                    + (G - gl) ** 2 / (H - hl + lam)
                    - parent_score)
            gain[~valid] = -np.inf
            pos = int(np.argmax(gain))
            if gain[pos] > 1e-12 and (best is None or gain[pos] > best[0]):
                best = (gain[pos], f, (sv[pos] + sv[pos + 1]) / 2.0)

        if best is None:
            return node
        _, f, thr = best
        go_left = X[idx, f] <= thr
        builder.feature[node] = f
        builder.threshold[node] = thr
        builder.left[node] = grow(idx[go_left], depth + 1)
        builder.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(n), 0)
    return builder.finish()


def eval_tree(tree, X):
    """(n_rows, value_dim) leaf values for one tree; small-batch helper."""
    return TreeEnsemble([tree]).eval(X)[0]


class TreeEnsemble:
    """All trees of an ensemble concatenated for joint batch evaluation."""

    def __init__(self, trees):
        offsets = np.cumsum([0] + [t.num_nodes for t in trees[:-1]]).astype(np.int32)
        self.roots = offsets
        self.feature = np.concatenate([t.feature for t in trees])
        shifted = []
        for off, t in zip(offsets, trees):
            shifted.append(np.where(t.left >= 0, t.left + off, -1))
        self.left = np.concatenate(shifted).astype(np.int32)
        shifted = []
        for off, t in zip(offsets, trees):
            shifted.append(np.where(t.right >= 0, t.right + off, -1))
        self.right = np.concatenate(shifted).astype(np.int32)
        self.threshold = np.concatenate([t.threshold for t in trees])
        self.value = np.concatenate([t.value for t in trees], axis=0)
        self.max_depth = max(t.depth for t in trees)

    def eval(self, X):
        """(n_trees, n_rows, value_dim) leaf values."""
        X = np.asarray(X, dtype=np.float64)
        n_rows = X.shape[0]
        active = np.broadcast_to(self.roots[:, None], (self.roots.size, n_rows)).copy()
        rows = np.arange(n_rows)[None, :]
        for _ in range(self.max_depth + 1):
            feat = self.feature[active]
            interior = feat >= 0
            if not interior.any():
                break
            xv = X[rows, np.where(interior, feat, 0)]
            go_left = xv <= self.threshold[active]
            nxt = np.where(go_left, self.left[active], self.right[active])
            active = np.where(interior, nxt, active)
        return self.value[active]
