"""
Tree Oracle
Desk-scale exact machinery: labeled non-backtracking tree enumeration, tree weights,
the non-backtracking iterations z, the fresh-matrix iterations y, the tree-sum
identity check and polynomial AMPW with its Monte Carlo moment comparison
"""

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.activations import Activation, ActivationFamily, PolynomialFamily
from core.amp_engine import OnsagerVariant, Trajectory, amp_run
from core.errors import BudgetExceededError, PreconditionError, ZeroDiagonalRequiredError
from core.matrix_sampler import EntryDistribution, SampledMatrix, sample_dense_batch
from core.profiles import CorrelationProfile, VarianceProfile
from utils.logger import get_logger

logger = get_logger("core.tree_oracle")

MAX_N = 6
MAX_DEPTH = 3
MAX_DEGREE = 3
MAX_MARKS = 2
MAX_TREES = 100_000
MOMENT_MAX_N = 8

MatrixLike = Union[SampledMatrix, np.ndarray]


@dataclass(frozen=True, eq=False)
class LabeledTree:
    """
    Planted labeled tree stored in depth-first preorder.

    Vertex 0 is the root (parent -1, mark -1). exponents[v] is the leaf exponent
    of a leaf at depth `horizon` and the zero vector everywhere else. Children of
    a vertex are ordered and grouped by non-decreasing mark.
    """
    parents: Tuple[int, ...]
    types: Tuple[int, ...]
    marks: Tuple[int, ...]
    exponents: Tuple[Tuple[int, ...], ...]
    horizon: int

    @property
    def size(self) -> int:
        return len(self.parents)

    @property
    def q(self) -> int:
        return len(self.exponents[0])

    @cached_property
    def children(self) -> Tuple[Tuple[int, ...], ...]:
        kids: List[List[int]] = [[] for _ in self.parents]
        for v, parent in enumerate(self.parents):
            if parent >= 0:
                kids[parent].append(v)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def depths(self) -> Tuple[int, ...]:
        depths = [0] * self.size
        for v in range(1, self.size):
            depths[v] = depths[self.parents[v]] + 1
        return tuple(depths)

    def is_leaf(self, v: int) -> bool:
        return v > 0 and not self.children[v]

    def child_counts(self, v: int) -> Tuple[int, ...]:
        """u[1..q]: children per mark; for a leaf, its exponent vector"""
        if not self.children[v]:
            return self.exponents[v]
        counts = [0] * self.q
        for child in self.children[v]:
            counts[self.marks[child]] += 1
        return tuple(counts)

    def violations(self, n: int, q: int, d: int) -> List[str]:
        """Every broken structural rule; empty for a valid non-backtracking tree"""
        problems = []
        if self.parents[0] != -1:
            problems.append("vertex 0 is not the root")
        if len(self.children[0]) != 1:
            problems.append(f"root has {len(self.children[0])} children")
        zero = (0,) * q
        for v in range(self.size):
            if not 0 <= self.types[v] < n:
                problems.append(f"vertex {v} has type {self.types[v]} outside [0, {n})")
            if v == 0:
                continue
            parent = self.parents[v]
            if not 0 <= parent < v:
                problems.append(f"vertex {v} has parent {parent} out of preorder")
                continue
            if not 0 <= self.marks[v] < q:
                problems.append(f"vertex {v} has mark {self.marks[v]} outside [0, {q})")
            if len(self.children[v]) > d:
                problems.append(f"vertex {v} has {len(self.children[v])} > {d} children")
            if self.depths[v] > self.horizon:
                problems.append(f"vertex {v} lies below depth {self.horizon}")
            if self.types[v] == self.types[parent]:
                problems.append(f"edge {v}->{parent} repeats type {self.types[v]}")
            if parent > 0:
                grand = self.parents[parent]
                triple = (self.types[v], self.types[parent], self.types[grand])
                if len(set(triple)) < 3:
                    problems.append(f"path through {v} backtracks with types {triple}")
            kid_marks = [self.marks[c] for c in self.children[v]]
            if kid_marks != sorted(kid_marks):
                problems.append(f"children of {v} are not grouped by mark")
            exponent = self.exponents[v]
            if self.is_leaf(v) and self.depths[v] == self.horizon:
                if sum(exponent) > d or min(exponent) < 0:
                    problems.append(f"leaf {v} has exponent {exponent} outside |c| <= {d}")
            elif exponent != zero:
                problems.append(f"vertex {v} is not a maximal-depth leaf but carries {exponent}")
        return problems

    def to_lines(self) -> List[str]:
        """One line per vertex: parent type mark exponents..."""
        return [" ".join(str(value) for value in (self.parents[v], self.types[v], self.marks[v],
                                                  *self.exponents[v]))
                for v in range(self.size)]


@dataclass(frozen=True)
class TreeWeight:
    w: float
    gamma: float
    x: float

    @property
    def value(self) -> float:
        return self.w * self.gamma * self.x


@dataclass(frozen=True)
class _Node:
    vtype: int
    mark: int
    exponent: Tuple[int, ...]
    children: Tuple["_Node", ...]


def dump_trees(trees: Sequence[LabeledTree]) -> str:
    """Line-oriented dump, trees separated by blank lines"""
    return "\n\n".join("\n".join(tree.to_lines()) for tree in trees) + "\n"


def load_trees(text: str, horizon: int) -> List[LabeledTree]:
    """Inverse of dump_trees; the horizon is not part of the dump"""
    trees = []
    for block in text.strip().split("\n\n"):
        rows = [[int(token) for token in line.split()] for line in block.splitlines() if line.strip()]
        if not rows:
            continue
        trees.append(LabeledTree(parents=tuple(row[0] for row in rows),
                                 types=tuple(row[1] for row in rows),
                                 marks=tuple(row[2] for row in rows),
                                 exponents=tuple(tuple(row[3:]) for row in rows),
                                 horizon=horizon))
    return trees


def _multi_indices(q: int, d: int) -> List[Tuple[int, ...]]:
    return [c for c in itertools.product(range(d + 1), repeat=q) if sum(c) <= d]


def _check_budget(n: int, q: int, d: int, t: int) -> None:
    if n > MAX_N or t > MAX_DEPTH or d > MAX_DEGREE or q > MAX_MARKS:
        raise BudgetExceededError(
            f"Tree enumeration limited to n<={MAX_N}, t<={MAX_DEPTH}, d<={MAX_DEGREE}, "
            f"q<={MAX_MARKS}; asked for n={n}, t={t}, d={d}, q={q}")
    if n < 1 or q < 1 or d < 0 or t < 1:
        raise PreconditionError(f"Invalid enumeration request n={n}, q={q}, d={d}, t={t}")


def count_nb_trees(n: int, q: int, d: int, t: int, exclude_type: Optional[int] = None,
                   root_type: int = 0) -> int:
    """Size of T^t_i(r) (or T^t_{i->j}(r)) by counting, without enumerating"""
    multi = _multi_indices(q, d)
    branching = max(n - 2, 0)
    count = len(multi)
    for _ in range(t - 1):
        count = sum((branching * count) ** sum(c) for c in multi)
    excluded = {root_type} if exclude_type is None else {root_type, exclude_type}
    return (n - len(excluded)) * count


def enumerate_nb_trees(n: int, q: int, d: int, t: int, root_type: int, mark: int,
                       exclude_type: Optional[int] = None,
                       max_trees: int = MAX_TREES) -> List[LabeledTree]:
    """
    Exhaustive list of T^t_i(r), or of T^t_{i->j}(r) when exclude_type = j.

    Trees are emitted depth first in lexicographic (type, mark, exponent) order.

    Raises:
        BudgetExceededError: outside the desk-scale budget or above max_trees trees
    """
    _check_budget(n, q, d, t)
    if not 0 <= root_type < n or not 0 <= mark < q:
        raise PreconditionError(f"Root type {root_type} or mark {mark} out of range")
    expected = count_nb_trees(n, q, d, t, exclude_type, root_type)
    if expected > max_trees:
        raise BudgetExceededError(f"{expected} trees exceed the cap of {max_trees}")

    multi = _multi_indices(q, d)
    zero = (0,) * q
    memo: Dict[Tuple[int, int, int, int], Tuple[_Node, ...]] = {}

    def subtrees(vtype: int, ptype: int, vmark: int, depth: int) -> Tuple[_Node, ...]:
        key = (vtype, ptype, vmark, depth)
        if key in memo:
            return memo[key]
        if depth == t:
            result = tuple(_Node(vtype, vmark, c, ()) for c in multi)
        else:
            child_types = [c for c in range(n) if c != vtype and c != ptype]
            options = []
            for counts in multi:
                slots = [s for s in range(q) for _ in range(counts[s])]
                choices = [[sub for ct in child_types for sub in subtrees(ct, vtype, s, depth + 1)]
                           for s in slots]
                options.extend(_Node(vtype, vmark, zero, combo)
                               for combo in itertools.product(*choices))
            result = tuple(options)
        memo[key] = result
        return result

    excluded = {root_type} if exclude_type is None else {root_type, exclude_type}
    trees = []
    for child_type in range(n):
        if child_type in excluded:
            continue
        for sub in subtrees(child_type, root_type, mark, 1):
            trees.append(_flatten(root_type, sub, q, t))
    logger.debug(f"Enumerated {len(trees)} trees n={n} q={q} d={d} t={t} "
                 f"root={root_type} exclude={exclude_type}")
    return trees


def _flatten(root_type: int, top: _Node, q: int, t: int) -> LabeledTree:
    parents, types, marks, exponents = [-1], [root_type], [-1], [(0,) * q]
    stack = [(top, 0)]
    while stack:
        node, parent = stack.pop()
        index = len(parents)
        parents.append(parent)
        types.append(node.vtype)
        marks.append(node.mark)
        exponents.append(node.exponent)
        stack.extend((child, index) for child in reversed(node.children))
    return LabeledTree(parents=tuple(parents), types=tuple(types), marks=tuple(marks),
                       exponents=tuple(exponents), horizon=t)


def _dense(W: MatrixLike) -> np.ndarray:
    return W.to_dense() if isinstance(W, SampledMatrix) else np.asarray(W, dtype=float)


def _require_zero_diagonal(matrices: Sequence[np.ndarray]) -> None:
    for M in matrices:
        if np.any(np.diagonal(M, axis1=-2, axis2=-1) != 0):
            raise ZeroDiagonalRequiredError("Non-backtracking iterations need W_ii = 0")


def _initial_points(x0, n: int, q: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        return np.full((n, q), float(x0))
    return np.broadcast_to(x0.reshape(n, -1), (n, q)).copy()


def tree_weight(tree: LabeledTree, W: MatrixLike, f: PolynomialFamily, x0,
                fresh_matrices: Optional[Sequence[MatrixLike]] = None) -> TreeWeight:
    """
    W(T), Gamma(T, alpha, t) and x(T) of one tree.
    With fresh matrices the edge into a vertex at depth k reads W^{t-k}.
    """
    t = tree.horizon
    n = _dense(W).shape[0] if fresh_matrices is None else _dense(fresh_matrices[0]).shape[0]
    x = _initial_points(x0, n, tree.q)
    terms: Dict[Tuple[int, ...], List[int]] = {}
    for term, iota in enumerate(f.exponents):
        terms.setdefault(tuple(int(e) for e in iota), []).append(term)
    matrices = None if fresh_matrices is None else [_dense(M) for M in fresh_matrices]
    base = None if matrices is not None else _dense(W)

    w = gamma = x_prod = 1.0
    for v in range(1, tree.size):
        depth = tree.depths[v]
        M = base if matrices is None else matrices[t - depth]
        w *= float(M[tree.types[tree.parents[v]], tree.types[v]])
        counts = tree.child_counts(v)
        gamma *= float(sum(f.alpha(term, index=tree.types[v], step=t - depth, mark=tree.marks[v])
                           for term in terms.get(counts, [])))
        if tree.is_leaf(v):
            x_prod *= float(np.prod(x[tree.types[v]] ** np.asarray(tree.exponents[v])))
    return TreeWeight(w=w, gamma=gamma, x=x_prod)


@dataclass(frozen=True, eq=False)
class NBIterates:
    """arrow[t][i, j, r] = z^t_{i->j}(r) and node[t][i, r] = z^t_i(r), t = 0..t_max"""
    arrow: Tuple[np.ndarray, ...]
    node: Tuple[np.ndarray, ...]

    @property
    def t_max(self) -> int:
        return len(self.node) - 1


def _mark_values(f: PolynomialFamily, arrow: np.ndarray, t: int) -> np.ndarray:
    """F[b, l, i, r] = f_r(z^t_{l->i}, l, t)"""
    n = arrow.shape[1]
    index = np.arange(n)[:, None]
    argument = arrow[..., 0] if f.q == 1 else arrow
    return np.stack([np.broadcast_to(f.evaluate(argument, index=index, step=t, mark=r),
                                     arrow.shape[:3])
                     for r in range(f.marks)], axis=-1)


def _nb_iterate(steps: Sequence[np.ndarray], f: PolynomialFamily, x0: np.ndarray) -> NBIterates:
    """Batched recursion; steps[t] is the (B, n, n) matrix stack used to build step t + 1"""
    batch, n, _ = steps[0].shape
    q = x0.shape[1]
    offdiag = 1.0 - np.eye(n)
    arrow = np.broadcast_to(x0[None, :, None, :], (batch, n, n, q)).copy()
    arrows = [arrow]
    nodes = [np.broadcast_to(x0[None], (batch, n, q)).copy()]
    for t, M in enumerate(steps):
        F = _mark_values(f, arrows[-1], t)
        G = M[..., None] * F.transpose(0, 2, 1, 3)
        nodes.append(G.sum(axis=2))
        arrows.append(np.einsum("bilr,jl->bijr", G, offdiag))
    return NBIterates(arrow=tuple(arrows), node=tuple(nodes))


def _check_polynomial(f: PolynomialFamily, x0, n: int) -> np.ndarray:
    if f.marks != f.q:
        raise PreconditionError(f"f has {f.marks} marks but acts on {f.q}-vectors")
    return _initial_points(x0, n, f.q)


def _unbatch(iterates: NBIterates) -> NBIterates:
    return NBIterates(arrow=tuple(a[0] for a in iterates.arrow),
                      node=tuple(z[0] for z in iterates.node))


def z_recursion(W: MatrixLike, f: PolynomialFamily, x0, t_max: int) -> NBIterates:
    """
    z^0_{i->j} = x0_i; z^{t+1}_{i->j}(r) = sum_{l != j} W_il f_r(z^t_{l->i}, l, t);
    z^{t+1}_i(r) sums over every l.

    Raises:
        ZeroDiagonalRequiredError: W has a non-zero diagonal entry
    """
    M = _dense(W)
    _require_zero_diagonal([M])
    x0 = _check_polynomial(f, x0, M.shape[0])
    return _unbatch(_nb_iterate([M[None]] * t_max, f, x0))


def y_iterations(W_list: Sequence[MatrixLike], f: PolynomialFamily, x0,
                 t_max: Optional[int] = None) -> NBIterates:
    """Non-backtracking iterations with W_list[t] used at step t"""
    t_max = len(W_list) if t_max is None else t_max
    if len(W_list) < t_max:
        raise PreconditionError(f"y iterations to depth {t_max} need {t_max} matrices, "
                                f"got {len(W_list)}")
    matrices = [_dense(M) for M in W_list[:t_max]]
    if len({M.shape for M in matrices}) > 1:
        raise PreconditionError("Fresh matrices must share their dimension")
    _require_zero_diagonal(matrices)
    x0 = _check_polynomial(f, x0, matrices[0].shape[0])
    return _unbatch(_nb_iterate([M[None] for M in matrices], f, x0))


@dataclass(frozen=True)
class TreeIdentityReport:
    max_gap: float
    checks: int
    trees: int


def verify_tree_identity(W: MatrixLike, f: PolynomialFamily, x0, t: int,
                         indices: Optional[Sequence[Tuple[int, Optional[int], int]]] = None,
                         fresh_matrices: Optional[Sequence[MatrixLike]] = None,
                         max_trees: int = MAX_TREES) -> TreeIdentityReport:
    """
    Compare the recursion with the tree sum.

    Args:
        W: zero-diagonal matrix (ignored when fresh_matrices is given)
        f: polynomial family; its degree sets the enumeration degree d
        x0: initial point, (n,) or (n, q)
        t: depth
        indices: (i, j, r) triples, j = None for z^t_i(r); default is every triple
        fresh_matrices: W^0..W^{t-1} to check the y iterations instead of z

    Returns:
        TreeIdentityReport with the largest |recursion - tree sum|
    """
    if fresh_matrices is not None:
        fresh_matrices = [_dense(M) for M in fresh_matrices]
        iterates = y_iterations(fresh_matrices, f, x0, t)
        n = fresh_matrices[0].shape[0]
    else:
        W = _dense(W)
        iterates = z_recursion(W, f, x0, t)
        n = W.shape[0]
    q, d = f.q, f.degree
    _check_budget(n, q, d, t)

    if indices is None:
        indices = [(i, j, r) for i in range(n) for j in [None, *range(n)] if j != i
                   for r in range(q)]

    max_gap = 0.0
    tree_total = 0
    for i, j, r in indices:
        trees = enumerate_nb_trees(n, q, d, t, root_type=i, mark=r, exclude_type=j,
                                   max_trees=max_trees)
        tree_total += len(trees)
        tree_sum = sum(tree_weight(tree, W, f, x0, fresh_matrices).value for tree in trees)
        value = iterates.node[t][i, r] if j is None else iterates.arrow[t][i, j, r]
        max_gap = max(max_gap, abs(float(value) - tree_sum))
    logger.debug(f"Tree identity n={n} t={t}: {len(indices)} checks, {tree_total} trees, "
                 f"max gap {max_gap:.3e}")
    return TreeIdentityReport(max_gap=max_gap, checks=len(indices), trees=tree_total)


def run_polynomial_ampw(W: SampledMatrix, p: PolynomialFamily, x0, t_max: int) -> Trajectory:
    """x^{t+1} = W p(x^t) - diag((W * W^T) dp(x^t)) p(x^{t-1}), run by the AMPW engine"""
    if np.any(W.matrix.diagonal() != 0):
        raise ZeroDiagonalRequiredError("Polynomial AMPW needs W_ii = 0")
    if p.q != 1 or p.marks != 1:
        raise PreconditionError("Polynomial AMP needs a univariate single-mark family")
    h = Activation(family=ActivationFamily.POLYNOMIAL, polynomial=p)
    return amp_run(W, None, None, h, x0, variant=OnsagerVariant.AMPW, t_max=t_max)


def _ampw_batch(W: np.ndarray, p: PolynomialFamily, x0: np.ndarray, t_max: int) -> np.ndarray:
    """x^{t_max} for a (B, n, n) stack of matrices"""
    index = np.arange(W.shape[1])
    h_prev = np.broadcast_to(p.evaluate(x0, index=index, step=0), W.shape[:2])
    x = np.einsum("bij,bj->bi", W, h_prev)
    for t in range(1, t_max):
        h_t = p.evaluate(x, index=index, step=t)
        ons = np.einsum("bij,bji,bj->bi", W, W, p.derivative(x, index=index, step=t))
        x = np.einsum("bij,bj->bi", W, h_t) - ons * h_prev
        h_prev = h_t
    return x


def moment_comparison(S: VarianceProfile, T: CorrelationProfile, p: PolynomialFamily, x0,
                      t: int = 2, samples: int = 100_000, seed: int = 0,
                      dist: Optional[EntryDistribution] = None,
                      batch: int = 10_000) -> pd.DataFrame:
    """
    Monte Carlo moments E[v_i^{2m}], m = 1, 2, of polynomial AMPW iterates (x),
    non-backtracking iterates (z, same matrix as x) and fresh-matrix iterates (y).

    Returns:
        One row per (pair, m, i) with the two estimates, their difference and the
        standard error of the difference of two independent means
    """
    n = S.n
    if n > MOMENT_MAX_N:
        raise BudgetExceededError(f"Moment comparison runs dense batches up to n={MOMENT_MAX_N}")
    if not S.zero_diagonal:
        raise ZeroDiagonalRequiredError("Moment comparison needs a zero-diagonal profile")
    if p.q != 1 or p.marks != 1:
        raise PreconditionError("Moment comparison needs a univariate single-mark family")
    x0 = _initial_points(x0, n, 1)
    rng = np.random.default_rng(seed)

    powers = (2, 4, 8)
    sums = {name: {k: np.zeros(n) for k in powers} for name in ("x", "y", "z")}
    for start in range(0, samples, batch):
        size = min(batch, samples - start)
        W = sample_dense_batch(S, T, size, rng, dist)
        fresh = [sample_dense_batch(S, T, size, rng, dist) for _ in range(t)]
        values = {
            "x": _ampw_batch(W, p, x0[:, 0], t),
            "z": _nb_iterate([W] * t, p, x0).node[t][..., 0],
            "y": _nb_iterate(fresh, p, x0).node[t][..., 0],
        }
        for name, v in values.items():
            for k in powers:
                sums[name][k] += np.sum(v ** k, axis=0)

    def moment(name: str, m: int) -> Tuple[np.ndarray, np.ndarray]:
        mean = sums[name][2 * m] / samples
        second = sums[name][4 * m] / samples
        return mean, np.sqrt(np.clip(second - mean ** 2, 0.0, None) / samples)

    records = []
    for pair in ("x-z", "y-z"):
        lhs_name, rhs_name = pair.split("-")
        for m in (1, 2):
            lhs, se_lhs = moment(lhs_name, m)
            rhs, se_rhs = moment(rhs_name, m)
            se = np.sqrt(se_lhs ** 2 + se_rhs ** 2)
            for i in range(n):
                records.append({"pair": pair, "m": m, "i": i, "lhs": float(lhs[i]),
                                "rhs": float(rhs[i]), "diff": float(lhs[i] - rhs[i]),
                                "se": float(se[i]), "samples": samples})
    return pd.DataFrame.from_records(records, columns=["pair", "m", "i", "lhs", "rhs", "diff",
                                                       "se", "samples"])
