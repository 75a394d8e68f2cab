"""Non-greedy dose-tree optimization by alternating node updates.

A complete binary tree of fixed height is optimized by revisiting one node
at a time with the rest of the tree frozen: internal nodes re-pick their
split against the fixed child subtrees, leaves re-pick their dose, and the
depth levels are swept root-to-leaf then leaf-to-root until the objective or
the topology stops changing. Node selection among the per-feature best
splits is annealed softmax sampling (sharpness grows with the sweep count),
with a deterministic argmax mode for exact tests. Undersized leaves are
collapsed into their parent after convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .effectcurve import EffectCurveGrid
from .errors import EmptyNodeError

# Auto-calibrated softmax sharpness at the first annealed update:
# alpha0 = ALPHA_CALIBRATION / (range of per-feature split scores).
# Small enough that early sweeps genuinely explore across features.
ALPHA_CALIBRATION = 2.0


@dataclass(frozen=True)
class SplitRule:
    """Axis-aligned rule: x[feature] <= threshold routes left."""

    feature: int
    threshold: float

    def __post_init__(self):
        if self.feature < 0:
            raise ValueError("feature index must be nonnegative")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


class Node:
    """Binary tree node; a leaf holds a dose, an internal node a SplitRule."""

    __slots__ = ("rule", "left", "right", "dose", "n_samples")

    def __init__(self, rule=None, left=None, right=None, dose=None, n_samples=0):
        self.rule = rule
        self.left = left
        self.right = right
        self.dose = dose
        self.n_samples = n_samples

    @property
    def is_leaf(self):
        return self.rule is None

    def copy(self):
        if self.is_leaf:
            return Node(dose=self.dose, n_samples=self.n_samples)
        return Node(rule=self.rule, left=self.left.copy(),
                    right=self.right.copy(), n_samples=self.n_samples)


@dataclass
class DoseTree:
    """Axis-aligned binary dose tree (doses on the internal [0, 1] scale)."""

    root: Node

    def assigned_dose(self, X):
        """Route each row of X to its leaf dose."""
        X = np.atleast_2d(np.asarray(X, float))
        out = np.empty(X.shape[0])
        _assign(self.root, X, np.arange(X.shape[0]), out)
        return out

    def leaves(self):
        found = []
        _collect_leaves(self.root, found)
        return found

    def depth(self):
        return _depth(self.root)

    def n_leaves(self):
        return len(self.leaves())

    def copy(self):
        return DoseTree(self.root.copy())

    def to_dict(self, feature_names=None):
        return _node_to_dict(self.root, feature_names)

    @classmethod
    def from_dict(cls, payload, feature_names=None):
        return cls(_node_from_dict(payload, feature_names))


def _assign(node, X, idx, out):
    if idx.size == 0:
        return
    if node.is_leaf:
        out[idx] = node.dose
        return
    go_left = X[idx, node.rule.feature] <= node.rule.threshold
    _assign(node.left, X, idx[go_left], out)
    _assign(node.right, X, idx[~go_left], out)


def _collect_leaves(node, found):
    if node.is_leaf:
        found.append(node)
    else:
        _collect_leaves(node.left, found)
        _collect_leaves(node.right, found)


def _depth(node):
    if node.is_leaf:
        return 0
    return 1 + max(_depth(node.left), _depth(node.right))


def _node_to_dict(node, feature_names):
    if node.is_leaf:
        return {"kind": "leaf", "dose": float(node.dose),
                "n_samples": int(node.n_samples)}
    name = (feature_names[node.rule.feature]
            if feature_names is not None else None)
    return {
        "kind": "split",
        "feature": int(node.rule.feature),
        "feature_name": name,
        "threshold": float(node.rule.threshold),
        "left": _node_to_dict(node.left, feature_names),
        "right": _node_to_dict(node.right, feature_names),
    }


def _node_from_dict(payload, feature_names):
    if payload["kind"] == "leaf":
        return Node(dose=payload["dose"], n_samples=payload.get("n_samples", 0))
    rule = SplitRule(payload["feature"], payload["threshold"])
    return Node(rule=rule,
                left=_node_from_dict(payload["left"], feature_names),
                right=_node_from_dict(payload["right"], feature_names))


@dataclass(frozen=True)
class AnnealSchedule:
    """Softmax sharpness schedule alpha_t = alpha0 * t (nondecreasing).

    ``alpha0=None`` calibrates alpha0 from the spread of split scores seen at
    the first stochastic update. ``deterministic`` switches every node update
    to pure argmax.
    """

    alpha0: object = None
    deterministic: bool = False

    def alpha(self, t, calibrated_alpha0):
        a0 = self.alpha0 if self.alpha0 is not None else calibrated_alpha0
        return float(a0) * max(t, 1)


@dataclass(frozen=True)
class TaoConfig:
    height: int = 2
    n0: object = None  # None -> max(10, n // 50)
    max_sweeps: int = 50
    tol: float = 1e-9
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.max_sweeps < 1 or self.restarts < 1:
            raise ValueError("height, max_sweeps and restarts must be >= 1")

    def resolve_n0(self, n):
        return max(10, n // 50) if self.n0 is None else int(self.n0)


def assigned_dose(tree: DoseTree, x):
    """Single-sample routing convenience wrapper."""
    return float(tree.assigned_dose(np.atleast_2d(x))[0])


def objective(tree: DoseTree, curves: EffectCurveGrid, X):
    """Sum over samples of the effect curve at the assigned dose (snapped to grid)."""
    doses = tree.assigned_dose(X)
    gi = curves.grid.snap_index(doses)
    return float(curves.values[np.arange(curves.n), gi].sum())


def optimize_leaf(subset, curves: EffectCurveGrid):
    """Grid dose maximizing the summed curves over the subset; ties go low."""
    subset = np.asarray(subset, int)
    if subset.size == 0:
        raise EmptyNodeError("cannot optimize the dose of an empty leaf")
    col_sum = curves.values[subset].sum(axis=0)
    return float(curves.grid.points[int(np.argmax(col_sum))])


def _split_candidates(values):
    """Cut positions and thresholds for one sorted feature column.

    Returns (ks, thresholds): routing the first k sorted samples left.
    Includes the all-right (k=0) and all-left (k=m) extremes so the current
    partition of any rule is always representable.
    """
    m = values.size
    boundaries = np.flatnonzero(np.diff(values) > 0) + 1
    ks = np.concatenate([[0], boundaries, [m]])
    thresholds = np.empty(ks.size)
    thresholds[0] = values[0] - 1.0
    thresholds[-1] = values[-1]
    if boundaries.size:
        thresholds[1:-1] = 0.5 * (values[boundaries - 1] + values[boundaries])
    return ks, thresholds


def best_split_per_feature(X_sub, gain_left, gain_right):
    """For each feature, the threshold maximizing
    W = sum_left gain_left + sum_right gain_right over the subset.

    Returns (W_best, thresholds) arrays of length p.
    """
    p = X_sub.shape[1]
    total_right = gain_right.sum()
    W_best = np.empty(p)
    thr_best = np.empty(p)
    delta = gain_left - gain_right
    for j in range(p):
        order = np.argsort(X_sub[:, j], kind="stable")
        xs = X_sub[order, j]
        ks, thresholds = _split_candidates(xs)
        prefix = np.concatenate([[0.0], np.cumsum(delta[order])])
        W = total_right + prefix[ks]
        best = int(np.argmax(W))
        W_best[j] = W[best]
        thr_best[j] = thresholds[best]
    return W_best, thr_best


def _subtree_gains(node, X, idx, curves):
    """Curve value each sample in idx would obtain under the fixed subtree."""
    sub = X[idx]
    out = np.empty(idx.size)
    _assign(node, sub, np.arange(sub.shape[0]), out)
    gi = curves.grid.snap_index(out)
    return curves.values[idx, gi]


def optimize_internal_node(node, X, idx, curves, alpha_t, rng,
                           deterministic=False):
    """One annealed (or argmax) update of an internal node's split rule.

    The node's children subtrees stay fixed; per-feature best splits compete
    through a softmax over their surrogate scores. Returns the spread of the
    per-feature scores (used for schedule calibration) or None when frozen.
    """
    if idx.size < 2:
        return None
    gain_left = _subtree_gains(node.left, X, idx, curves)
    gain_right = _subtree_gains(node.right, X, idx, curves)
    W_best, thr_best = best_split_per_feature(X[idx], gain_left, gain_right)
    if deterministic:
        go_left = X[idx, node.rule.feature] <= node.rule.threshold
        w_current = gain_left[go_left].sum() + gain_right[~go_left].sum()
        j = int(np.argmax(W_best))
        if W_best[j] > w_current:
            node.rule = SplitRule(j, float(thr_best[j]))
    else:
        logits = alpha_t * (W_best - W_best.max())
        probs = np.exp(logits)
        probs /= probs.sum()
        j = int(rng.choice(W_best.size, p=probs))
        node.rule = SplitRule(j, float(thr_best[j]))
    return float(W_best.max() - W_best.min())


def _internal_levels(root):
    """Internal nodes grouped by depth (root first)."""
    levels, frontier = [], [root]
    while frontier:
        internal = [nd for nd in frontier if not nd.is_leaf]
        if internal:
            levels.append(internal)
        frontier = [child for nd in internal for child in (nd.left, nd.right)]
    return levels


def _route_subsets(root, X):
    """Map id(node) -> training-sample indices reaching the node."""
    subsets = {}

    def walk(node, idx):
        subsets[id(node)] = idx
        if node.is_leaf:
            return
        go_left = X[idx, node.rule.feature] <= node.rule.threshold
        walk(node.left, idx[go_left])
        walk(node.right, idx[~go_left])

    walk(root, np.arange(X.shape[0]))
    return subsets


def _update_leaves(root, X, curves):
    subsets = _route_subsets(root, X)
    for leaf in DoseTree(root).leaves():
        idx = subsets[id(leaf)]
        if idx.size:
            leaf.dose = optimize_leaf(idx, curves)


def _annotate_counts(root, X):
    subsets = _route_subsets(root, X)

    def walk(node):
        node.n_samples = int(subsets[id(node)].size)
        if not node.is_leaf:
            walk(node.left)
            walk(node.right)

    walk(root)


def greedy_init(curves: EffectCurveGrid, X, height):
    """Greedy recursive partitioning on the curve objective (CART-style init)."""

    def best_leaf_value(prefix_row):
        return prefix_row.max()

    def build(idx, depth):
        if depth == height:
            return Node(dose=optimize_leaf(idx, curves))
        split = _greedy_best_split(curves, X, idx)
        if split is None:
            # unsplittable subset: degenerate all-left split keeps the
            # tree complete; the dead branch carries the same dose
            leaf_dose = optimize_leaf(idx, curves)
            rule = SplitRule(0, float(X[idx, 0].max()) if idx.size else 0.0)
            return Node(rule=rule,
                        left=build(idx, depth + 1),
                        right=_constant_subtree(height - depth - 1, leaf_dose))
        j, c = split
        go_left = X[idx, j] <= c
        return Node(rule=SplitRule(j, c),
                    left=build(idx[go_left], depth + 1),
                    right=build(idx[~go_left], depth + 1))

    return DoseTree(build(np.arange(X.shape[0]), 0))


def _constant_subtree(height, dose):
    if height == 0:
        return Node(dose=dose)
    return Node(rule=SplitRule(0, 0.0),
                left=_constant_subtree(height - 1, dose),
                right=_constant_subtree(height - 1, dose))


def _greedy_best_split(curves, X, idx):
    """Best (feature, threshold) for an immediate two-leaf split of idx."""
    if idx.size < 2:
        return None
    V = curves.values[idx]
    total = V.sum(axis=0)
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[idx, j], kind="stable")
        xs = X[idx[order], j]
        boundaries = np.flatnonzero(np.diff(xs) > 0) + 1
        if boundaries.size == 0:
            continue
        prefix = np.cumsum(V[order], axis=0)
        left_best = prefix[boundaries - 1].max(axis=1)
        right_best = (total[None, :] - prefix[boundaries - 1]).max(axis=1)
        W = left_best + right_best
        k = int(np.argmax(W))
        if best is None or W[k] > best[0]:
            cut = boundaries[k]
            thr = 0.5 * (xs[cut - 1] + xs[cut])
            best = (float(W[k]), j, float(thr))
    if best is None:
        return None
    return best[1], best[2]


def random_init(curves: EffectCurveGrid, X, height, rng, feature_probs=None):
    """Complete tree with random split features/thresholds and random leaf doses.

    ``feature_probs`` biases the feature draw (e.g. toward covariates with
    strong dose interaction); ``None`` draws uniformly.
    """
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    p = X.shape[1]

    def build(depth):
        if depth == height:
            dose = curves.grid.points[rng.integers(curves.grid.size)]
            return Node(dose=float(dose))
        j = int(rng.choice(p, p=feature_probs))
        c = float(rng.uniform(lo[j], hi[j]))
        return Node(rule=SplitRule(j, c), left=build(depth + 1),
                    right=build(depth + 1))

    return DoseTree(build(0))


def _tree_signature(root):
    if root.is_leaf:
        return ("L", root.dose)
    return ("S", root.rule.feature, root.rule.threshold,
            _tree_signature(root.left), _tree_signature(root.right))


def _run_tao(tree, curves, X, cfg, schedule, rng, trace):
    """Alternating sweeps on one tree, in place. Returns the final objective."""
    deterministic = schedule.deterministic
    calibrated_alpha0 = 1.0
    calibrated = False
    # Random-init trees carry arbitrary leaf doses; settling the leaves
    # first keeps the opening internal-node updates from chasing them.
    _update_leaves(tree.root, X, curves)
    prev_obj = objective(tree, curves, X)
    stall_obj = 0
    stall_topo = 0
    prev_sig = _tree_signature(tree.root)
    for t in range(1, cfg.max_sweeps + 1):
        alpha_t = schedule.alpha(t, calibrated_alpha0)
        levels = _internal_levels(tree.root)
        sweep_order = list(levels) + ["leaves"] + list(reversed(levels))
        for stage in sweep_order:
            if stage == "leaves":
                _update_leaves(tree.root, X, curves)
                trace.append(objective(tree, curves, X))
                continue
            for node in stage:
                subsets = _route_subsets(tree.root, X)
                idx = subsets[id(node)]
                spread = optimize_internal_node(
                    node, X, idx, curves, alpha_t, rng,
                    deterministic=deterministic)
                if spread is not None and not calibrated and spread > 0:
                    calibrated_alpha0 = ALPHA_CALIBRATION / spread
                    calibrated = True
                trace.append(objective(tree, curves, X))
        _update_leaves(tree.root, X, curves)
        obj = objective(tree, curves, X)
        trace.append(obj)
        stall_obj = stall_obj + 1 if abs(obj - prev_obj) <= cfg.tol * max(1.0, abs(prev_obj)) else 0
        sig = _tree_signature(tree.root)
        stall_topo = stall_topo + 1 if sig == prev_sig else 0
        prev_obj, prev_sig = obj, sig
        if stall_obj >= 2 or stall_topo >= 2:
            break
    return prev_obj


def prune(tree: DoseTree, curves: EffectCurveGrid, X, n0):
    """Collapse undersized leaves into their parents until all leaves hold >= n0.

    Idempotent: re-running on the output is a no-op.
    """
    tree = tree.copy()

    def collapse_pass(node, idx):
        """Returns (node, changed). Bottom-up single pass."""
        if node.is_leaf:
            return node, False
        go_left = X[idx, node.rule.feature] <= node.rule.threshold
        left, ch_l = collapse_pass(node.left, idx[go_left])
        right, ch_r = collapse_pass(node.right, idx[~go_left])
        node.left, node.right = left, right
        changed = ch_l or ch_r
        left_n = int(np.sum(go_left))
        right_n = idx.size - left_n
        undersized = (left.is_leaf and left_n < n0) or \
                     (right.is_leaf and right_n < n0)
        if undersized and (left.is_leaf or right.is_leaf):
            if idx.size:
                dose = optimize_leaf(idx, curves)
            else:
                dose = left.dose if left.is_leaf else right.dose
            return Node(dose=dose), True
        return node, changed

    changed = True
    while changed:
        tree.root, changed = collapse_pass(tree.root, np.arange(X.shape[0]))
    _annotate_counts(tree.root, X)
    return tree


@dataclass
class TaoResult:
    tree: DoseTree
    objective: float
    trace: list
    restart_objectives: list


def tao_fit(curves: EffectCurveGrid, X, cfg: TaoConfig,
            schedule: AnnealSchedule = AnnealSchedule(), rng=None,
            feature_probs=None):
    """Fit a dose tree by alternating optimization with restarts.

    Restart 0 starts from the greedy tree, the rest from random trees
    (feature draws optionally biased by ``feature_probs``); the pruned tree
    with the best objective wins. Returns a :class:`TaoResult`.
    """
    X = np.atleast_2d(np.asarray(X, float))
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n0 = cfg.resolve_n0(X.shape[0])
    best = None
    restart_objs = []
    full_trace = []
    for r in range(cfg.restarts):
        restart_rng = np.random.default_rng(rng.integers(2 ** 63))
        if r == 0:
            tree = greedy_init(curves, X, cfg.height)
        else:
            tree = random_init(curves, X, cfg.height, restart_rng,
                               feature_probs)
        trace = []
        _run_tao(tree, curves, X, cfg, schedule, restart_rng, trace)
        tree = prune(tree, curves, X, n0)
        obj = objective(tree, curves, X)
        restart_objs.append(obj)
        full_trace.append(trace)
        if best is None or obj > best[0]:
            best = (obj, tree, trace)
    return TaoResult(tree=best[1], objective=best[0],
                     trace=best[2], restart_objectives=restart_objs)
