"""Exact information quantities on small discrete joints, and randomized checks built on them.

All logarithms are natural (nats). Terms with zero probability contribute zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ValidationError

NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteJoint:
    """Dense joint probability table over two or three finite variables."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim not in (2, 3):
            raise ValidationError(f"joint must have 2 or 3 axes, got {t.ndim}")
        if t.size == 0:
            raise ValidationError("joint has an empty alphabet")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValidationError("joint entries must be finite and nonnegative")
        total = float(t.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValidationError(f"joint sums to {total!r}, not 1")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def alphabet_sizes(self) -> tuple[int, ...]:
        return self.table.shape

    def marginal(self, *axes: int) -> np.ndarray:
        drop = tuple(a for a in range(self.table.ndim) if a not in axes)
        return self.table.sum(axis=drop)

    def swap(self, i: int = 0, j: int = 1) -> "DiscreteJoint":
        return DiscreteJoint(np.swapaxes(self.table, i, j))

    @classmethod
    def normalized(cls, weights) -> "DiscreteJoint":
        """Build from nonnegative weights, rescaled to sum to one."""
        w = np.asarray(weights, dtype=np.float64)
        s = w.sum()
        if not s > 0:
            raise ValidationError("weights must have a positive sum")
        t = w / s
        # a second pass absorbs the rounding left by the first division
        return cls(t / t.sum())


def _plogp(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(np.sum(nz * np.log(nz)))


def entropy(p) -> float:
    """Shannon entropy of a probability array (any shape) or a joint."""
    if isinstance(p, DiscreteJoint):
        p = p.table
    return -_plogp(p)


def cross_entropy(p, q) -> float:
    """``-sum p log q``; infinite where ``q = 0 < p``."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ParameterError("distributions differ in size")
    nz = p > 0
    if np.any(q[nz] == 0):
        return math.inf
    return float(-np.sum(p[nz] * np.log(q[nz])))


def _as_joint(j, ndim: int) -> DiscreteJoint:
    j = j if isinstance(j, DiscreteJoint) else DiscreteJoint(j)
    if j.table.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-way joint, got {j.table.ndim} axes")
    return j


def mutual_info(j) -> float:
    """``I(X;Y) = sum p(x,y) log p(x,y) / (p(x) p(y))`` for a 2-way joint."""
    t = _as_joint(j, 2).table
    px = t.sum(axis=1, keepdims=True)
    py = t.sum(axis=0, keepdims=True)
    nz = t > 0
    return float(np.sum(t[nz] * np.log(t[nz] / (px @ py)[nz])))


def conditional_mutual_info(j) -> float:
    """``I(A;B|C) = sum p(a,b,c) log p(a,b,c) p(c) / (p(a,c) p(b,c))`` for a joint over (A, B, C)."""
    t = _as_joint(j, 3).table
    pc = t.sum(axis=(0, 1), keepdims=True)
    pac = t.sum(axis=1, keepdims=True)
    pbc = t.sum(axis=0, keepdims=True)
    nz = t > 0
    ratio = (t * pc)[nz] / (pac * pbc)[nz]
    return float(np.sum(t[nz] * np.log(ratio)))


def group(table: np.ndarray, *blocks: tuple[int, ...]) -> DiscreteJoint:
    """Joint over variable blocks: each block of axes of ``table`` becomes one variable."""
    t = np.asarray(table, dtype=np.float64)
    order = [a for b in blocks for a in b]
    if sorted(order) != list(range(t.ndim)):
        raise ParameterError("blocks must partition the axes")
    t = np.transpose(t, order)
    sizes = [int(np.prod([table.shape[a] for a in b])) for b in blocks]
    return DiscreteJoint(t.reshape(sizes))


# ---------------------------------------------------------------- random tables


def random_simplex(rng: np.random.Generator, size: int, sparse: float = 0.0) -> np.ndarray:
    """Random distribution of length ``size``; ``sparse`` zeroes out entries with that probability."""
    p = rng.dirichlet(np.ones(size))
    if sparse > 0:
        p = np.where(rng.random(size) < sparse, 0.0, p)
        if p.sum() == 0:
            p[rng.integers(size)] = 1.0
    return p / p.sum()


def random_channel(rng: np.random.Generator, n_in: int, n_out: int, sparse: float = 0.0) -> np.ndarray:
    """Row-stochastic ``n_in x n_out`` conditional table."""
    return np.stack([random_simplex(rng, n_out, sparse) for _ in range(n_in)])


def random_joint(rng: np.random.Generator, sizes: tuple[int, ...], sparse: float = 0.0) -> DiscreteJoint:
    return DiscreteJoint.normalized(random_simplex(rng, int(np.prod(sizes)), sparse).reshape(sizes))


# ---------------------------------------------------------------- reports


@dataclass
class CheckReport:
    name: str
    trials: int
    max_violation: float = 0.0
    failures: list[dict] = field(default_factory=list)
    tolerance: float = 1e-9
    extra: dict = field(default_factory=dict)

    @property
    def trials_run(self) -> int:
        return self.trials

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, trial: int, violation: float, **info) -> None:
        self.max_violation = max(self.max_violation, violation)
        if violation > self.tolerance:
            self.failures.append({"trial": trial, "violation": violation, **info})

    def to_json(self) -> dict:
        out = {"check": self.name, "trials": self.trials, "max_violation": self.max_violation, "failures": self.failures}
        out.update(self.extra)
        return out


def _need_trials(trials: int) -> None:
    if trials < 1:
        raise ParameterError("trials must be >= 1")


# ---------------------------------------------------------------- conditional independence lemma


def _lemma_product(rng) -> tuple[np.ndarray, str]:
    # a = (a1, a2) with independent parts; b reads a1 only, c reads a2 only
    n1, n2, nb, nc = rng.integers(1, 4, size=4)
    p1, p2 = random_simplex(rng, n1), random_simplex(rng, n2)
    b_given, c_given = random_channel(rng, n1, nb, 0.2), random_channel(rng, n2, nc, 0.2)
    t = np.einsum("i,j,ib,jc->ijbc", p1, p2, b_given, c_given)
    return t.reshape(n1 * n2, nb, nc), "product"


def _lemma_xor(rng) -> tuple[np.ndarray, str]:
    # a = (x, y) with y uniform; b is a noisy copy of x, c a noisy copy of x xor y
    px = random_simplex(rng, 2)
    nb, nc = rng.integers(2, 4, size=2)
    b_given, c_given = random_channel(rng, 2, nb), random_channel(rng, 2, nc)
    t = np.zeros((2, 2, nb, nc))
    for x in range(2):
        for y in range(2):
            t[x, y] = 0.5 * px[x] * np.outer(b_given[x], c_given[x ^ y])
    return t.reshape(4, nb, nc), "xor"


def _lemma_independent(rng) -> tuple[np.ndarray, str]:
    na, nb, nc = rng.integers(1, 5, size=3)
    t = np.einsum("a,b,c->abc", random_simplex(rng, na), random_simplex(rng, nb), random_simplex(rng, nc))
    return t, "independent"


_LEMMA_FAMILIES = (_lemma_product, _lemma_xor, _lemma_independent)


def check_lemma1(trials: int = 1000, seed: int = 0, tolerance: float = 1e-9) -> CheckReport:
    """If ``b`` and ``c`` are independent, and also independent given ``a``, then ``I(a;b|c) = I(a;b)``.

    Joints are drawn from families where both premises hold by construction.
    Each trial reports ``|I(a;b|c) - I(a;b)|`` plus how far the premises are
    from holding exactly.
    """
    _need_trials(trials)
    rng = np.random.default_rng(seed)
    rep = CheckReport("conditional_independence_lemma", trials, tolerance=tolerance)
    premise = 0.0
    for k in range(trials):
        t, family = _LEMMA_FAMILIES[k % len(_LEMMA_FAMILIES)](rng)
        j = DiscreteJoint.normalized(t)
        lhs = conditional_mutual_info(j)
        rhs = mutual_info(DiscreteJoint(j.table.sum(axis=2)))
        premise = max(
            premise,
            mutual_info(DiscreteJoint(j.table.sum(axis=0))),
            conditional_mutual_info(DiscreteJoint(np.transpose(j.table, (1, 2, 0)))),
        )
        rep.record(k, abs(lhs - rhs), family=family, lhs=lhs, rhs=rhs)
    rep.extra["max_premise_gap"] = premise
    return rep


# ---------------------------------------------------------------- label-independent view bound


def theorem1_system(rng: np.random.Generator, max_alphabet: int = 4, identity_channel: bool = False,
                    label_free: bool = False) -> np.ndarray:
    """Joint table over ``(Y, Ghat, G, Gtilde)``.

    ``Y`` and ``Ghat`` are drawn independently, ``G`` from an explicit table
    ``p(g | y, ghat)`` and ``Gtilde`` from ``p(gtilde | g)``. With
    ``identity_channel`` ``Gtilde`` copies ``G``; with ``label_free`` ``G``
    ignores ``Y``.
    """
    ny, nh, ng = rng.integers(1, max_alphabet + 1, size=3)
    nt = ng if identity_channel else int(rng.integers(1, max_alphabet + 1))
    py, ph = random_simplex(rng, ny, 0.1), random_simplex(rng, nh, 0.1)
    if label_free:
        g_given = np.broadcast_to(random_channel(rng, nh, ng, 0.2), (ny, nh, ng))
    else:
        g_given = random_channel(rng, ny * nh, ng, 0.2).reshape(ny, nh, ng)
    t_given = np.eye(ng) if identity_channel else random_channel(rng, ng, nt, 0.2)
    return np.einsum("y,h,yhg,gt->yhgt", py, ph, g_given, t_given)


def theorem1_terms(table: np.ndarray) -> dict:
    """Every information term of the bound, computed from a ``(Y, Ghat, G, Gtilde)`` joint."""
    t = np.asarray(table, dtype=np.float64)
    t = t / t.sum()
    i_hat = mutual_info(DiscreteJoint(t.sum(axis=(0, 2))))
    i_g = mutual_info(DiscreteJoint(t.sum(axis=(0, 1))))
    i_y = mutual_info(DiscreteJoint(t.sum(axis=(1, 2))))
    i_pair = mutual_info(group(t.sum(axis=2), (0, 1), (2,)))
    i_y_given_hat = conditional_mutual_info(DiscreteJoint(np.transpose(t.sum(axis=2), (0, 2, 1))))
    return {
        "I_hat_tilde": i_hat,
        "I_g_tilde": i_g,
        "I_y_tilde": i_y,
        "I_pair_tilde": i_pair,
        "I_y_tilde_given_hat": i_y_given_hat,
        "H_g": entropy(t.sum(axis=(0, 1, 3))),
    }


def check_theorem1(trials: int = 500, seed: int = 0, max_alphabet: int = 4, tolerance: float = 1e-9,
                   chain_tolerance: float = 1e-10) -> CheckReport:
    """``I(Ghat;Gtilde) <= I(G;Gtilde) - I(Y;Gtilde)`` when ``Ghat`` is independent of ``Y``
    and ``Gtilde`` depends on ``(Y, Ghat)`` only through ``G``.

    Also checks the chain rule
    ``I((Y,Ghat);Gtilde) = I(Ghat;Gtilde) + I(Y;Gtilde|Ghat)`` per trial.
    Every fourth trial uses an identity channel and every fifth a label-free ``G``.
    """
    _need_trials(trials)
    if max_alphabet < 1:
        raise ParameterError("max_alphabet must be >= 1")
    rng = np.random.default_rng(seed)
    rep = CheckReport("label_independent_view_bound", trials, tolerance=tolerance)
    chain_max = 0.0
    for k in range(trials):
        t = theorem1_system(rng, max_alphabet, identity_channel=k % 4 == 3, label_free=k % 5 == 4)
        terms = theorem1_terms(t)
        violation = max(0.0, terms["I_hat_tilde"] - (terms["I_g_tilde"] - terms["I_y_tilde"]))
        chain = abs(terms["I_pair_tilde"] - terms["I_hat_tilde"] - terms["I_y_tilde_given_hat"])
        chain_max = max(chain_max, chain)
        if chain > chain_tolerance:
            rep.failures.append({"trial": k, "chain_rule_gap": chain})
        rep.record(k, violation, shape=list(t.shape))
    rep.extra["max_chain_rule_gap"] = chain_max
    return rep


# ---------------------------------------------------------------- contrastive bound


def infonce_bound_check(N: int = 16, trials: int = 1000, seed: int = 0, dim: int = 8, tau_cl: float = 0.5,
                        tolerance: float = 1e-9) -> CheckReport:
    """InfoNCE values on random embedding pairs must be ``<= 0``; identical rows give ``-log N``.

    ``extra`` summarizes the empirical distribution of ``infonce + log N``,
    which takes both signs.
    """
    import torch

    from .objectives import infonce_mi

    if N < 2:
        raise ParameterError("N must be >= 2")
    _need_trials(trials)
    gen = torch.Generator().manual_seed(seed)
    rep = CheckReport("infonce_upper_bound", trials, tolerance=tolerance)
    shifted = []
    for k in range(trials):
        e = torch.randn(N, dim, generator=gen, dtype=torch.float64)
        e_t = e + torch.randn(N, dim, generator=gen, dtype=torch.float64) * float(k % 5) * 0.5
        v = float(infonce_mi(e, e_t, tau_cl))
        shifted.append(v + math.log(N))
        rep.record(k, max(0.0, v), value=v)
    row = torch.randn(1, dim, generator=gen, dtype=torch.float64).expand(N, dim)
    sym = float(infonce_mi(row, row, tau_cl))
    rep.record(trials, abs(sym + math.log(N)), case="identical_rows", value=sym)
    q = np.quantile(shifted, [0.0, 0.25, 0.5, 0.75, 1.0])
    rep.extra["infonce_plus_log_n_quantiles"] = dict(zip(["min", "q25", "median", "q75", "max"], map(float, q)))
    rep.extra["identical_rows_value"] = sym
    return rep


def entropy_bound_check(trials: int = 1000, seed: int = 0, max_alphabet: int = 8, tolerance: float = 1e-10) -> CheckReport:
    """``H(p) <= H(p, q)`` for random discrete ``p, q`` (KL divergence is nonnegative)."""
    _need_trials(trials)
    rng = np.random.default_rng(seed)
    rep = CheckReport("entropy_cross_entropy_bound", trials, tolerance=tolerance)
    for k in range(trials):
        n = int(rng.integers(1, max_alphabet + 1))
        p, q = random_simplex(rng, n, 0.2), random_simplex(rng, n)
        rep.record(k, max(0.0, entropy(p) - cross_entropy(p, q)))
    return rep


def run_all(trials: int = 500, seed: int = 0) -> dict:
    """Every check at ``trials`` trials; the top-level ``max_violation`` is the worst of them."""
    reports = [
        check_lemma1(trials, seed),
        check_theorem1(trials, seed),
        infonce_bound_check(16, trials, seed),
        entropy_bound_check(trials, seed),
    ]
    return {
        "trials": trials,
        "seed": seed,
        "max_violation": max(r.max_violation for r in reports),
        "failures": [dict(f, check=r.name) for r in reports for f in r.failures],
        "checks": [r.to_json() for r in reports],
    }
