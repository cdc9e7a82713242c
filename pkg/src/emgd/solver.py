"""Pareto descent directions from per-task gradients, with elastic factors.

All gradients are stored in the negative convention g_i = -grad(loss_i), and
the model update is theta <- theta + gamma * d. Under this convention a
combined direction d is a Pareto descent direction when

    <g_i, d> >= sigma_i * ||d||^2    for every task i,

which is what the elastic solver guarantees (up to the solve tolerance).

The elastic problem  min ||sum_i lambda_i g_i||^2  s.t.  sum_i lambda_i
sigma_i = 1, lambda >= 0  reduces exactly to the classic min-norm-point
problem over the scaled points g_i / sigma_i via mu_i = lambda_i * sigma_i,
so one simplex solver backs both the elastic and the uniform (sigma = 1)
variants.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    DegenerateGradientError,
    InvalidInputError,
    NumericError,
    UnsupportedSizeError,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 250

# Squared-norm threshold below which two scaled gradients are treated as the
# same hull point (any convex weight is then optimal).
PARALLEL_EPS = 1e-18


@dataclass(frozen=True)
class GradientBundle:
    """Per-task flat gradient vectors for one optimization step.

    ``grads[i]`` is the negative loss gradient of task ``task_ids[i]`` with
    respect to the shared parameters (``negated=True`` records that sign
    convention). The memory stream, when present, uses task id 0.
    """

    task_ids: tuple
    grads: np.ndarray
    negated: bool = True

    def __post_init__(self):
        grads = np.atleast_2d(np.asarray(self.grads, dtype=np.float64))
        ids = tuple(int(t) for t in self.task_ids)
        object.__setattr__(self, "grads", grads)
        object.__setattr__(self, "task_ids", ids)
        if grads.ndim != 2 or grads.shape[0] < 1 or grads.shape[1] < 1:
            raise InvalidInputError("need at least one gradient of dimension >= 1")
        if len(ids) != grads.shape[0]:
            raise InvalidInputError(
                f"{len(ids)} task ids for {grads.shape[0]} gradients"
            )
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"duplicate task ids: {ids}")
        if not np.all(np.isfinite(grads)):
            raise NumericError("gradient bundle contains non-finite entries")

    @property
    def size(self) -> int:
        return self.grads.shape[0]

    @property
    def dim(self) -> int:
        return self.grads.shape[1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.grads, axis=1)


@dataclass(frozen=True)
class ElasticFactors:
    """Per-task relaxation weights, each in (0, 1]."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "sigma", sigma)
        if sigma.ndim != 1 or sigma.size < 1:
            raise InvalidInputError("sigma must be a non-empty vector")
        if not np.all(np.isfinite(sigma)):
            raise NumericError("sigma contains non-finite entries")
        if np.any(sigma <= 0.0) or np.any(sigma > 1.0):
            raise InvalidInputError("every elastic factor must lie in (0, 1]")


@dataclass
class ElasticState:
    """Running gradient-norm statistics used by the momentum factors.

    ``momentum[t]`` follows m_t <- eps1 * m_t + eps2 * ||g_t||, seeded with
    the first observed norm so a task's debut is not down-weighted.
    """

    momentum: dict = field(default_factory=dict)
    eps1: float = 0.9
    eps2: float = 0.1
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")


@dataclass(frozen=True)
class CombinationResult:
    """Solver output: weights, combined direction and diagnostics.

    ``alpha`` is the dual estimate -||d||^2 (0 at a Pareto critical point).
    ``degenerate_tasks`` lists task ids whose gradient was exactly zero.
    """

    lam: np.ndarray
    direction: np.ndarray
    objective: float
    alpha: float
    iterations: int
    converged: bool
    degenerate_tasks: tuple = ()


class MinNormResult(NamedTuple):
    mu: np.ndarray
    objective: float
    iterations: int
    converged: bool


class TwoTaskSolution(NamedTuple):
    lam1: float
    lam2: float
    degenerate: bool


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - np.max(logits))
    if np.any(z == 0.0):
        raise NumericError(
            "elastic factor underflowed to zero; raise the temperature"
        )
    return z / z.sum()


def elastic_factors_gmc(bundle: GradientBundle, state: ElasticState) -> ElasticFactors:
    """Elastic factors from gradient-norm momentum (mutates ``state``).

    Each task's momentum statistic is refreshed with the bundle's gradient
    norm, then the factors are a temperature-scaled softmax of the momenta.
    """
    norms = bundle.norms()
    if not np.all(np.isfinite(norms)):
        raise NumericError("non-finite gradient norm")
    for tid, n in zip(bundle.task_ids, norms):
        prev = state.momentum.get(tid)
        if prev is None:
            state.momentum[tid] = float(n)
        else:
            state.momentum[tid] = state.eps1 * prev + state.eps2 * float(n)
    logits = np.array([state.momentum[tid] for tid in bundle.task_ids])
    return ElasticFactors(_softmax(logits / state.temperature))


def elastic_factors_gs(bundle: GradientBundle, temperature: float = 1.0) -> ElasticFactors:
    """Elastic factors from summed pairwise cosine similarities.

    Task i scores sum_k cos(g_i, g_k), self-similarity included, so the
    factors reflect how aligned each gradient is with the rest of the bundle.
    Raises DegenerateGradientError on a zero-norm gradient; callers fall back
    to uniform factors.
    """
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    norms = bundle.norms()
    if np.any(norms == 0.0):
        raise DegenerateGradientError("zero-norm gradient: cosine undefined")
    unit = bundle.grads / norms[:, None]
    scores = (unit @ unit.T).sum(axis=1)
    return ElasticFactors(_softmax(scores / temperature))


def _affine_min_norm(M: np.ndarray, idx: list) -> np.ndarray:
    # Minimize w' M_SS w subject to sum(w) = 1 (weights may be negative):
    # KKT system [[2 M_SS, 1], [1', 0]] [w; nu] = [0; 1].
    n = len(idx)
    sub = M[np.ix_(idx, idx)]
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = 2.0 * sub
    A[:n, n] = 1.0
    A[n, :n] = 1.0
    b = np.zeros(n + 1)
    b[n] = 1.0
    try:
        sol = np.linalg.solve(A, b)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol[:n]


def solve_min_norm_simplex(
    points: Sequence, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> MinNormResult:
    """Minimum-norm point of the convex hull of ``points``.

    Solves min_mu ||sum_i mu_i p_i||^2 over the probability simplex by the
    min-norm-point active-set method: repeatedly add the most violating
    point to the working set, re-solve the affine subproblem exactly, and
    clip back to the simplex when a weight would go negative. Stops when the
    duality gap ||q||^2 - min_i <p_i, q> drops to ``tol``; with two points a
    single affine solve reproduces the clipped closed form.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if P.shape[0] < 1:
        raise InvalidInputError("need at least one point")
    if not np.all(np.isfinite(P)):
        raise NumericError("points contain non-finite entries")
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    k = P.shape[0]
    if k == 1:
        return MinNormResult(np.ones(1), float(P[0] @ P[0]), 0, True)

    M = P @ P.T
    S = [int(np.argmin(np.diag(M)))]
    w = np.array([1.0])

    iterations = 0
    for iterations in range(1, max_iter + 1):
        inner = M[:, S] @ w  # <p_i, q> for all i
        objective = float(w @ inner[S])
        j = int(np.argmin(inner))
        if objective - inner[j] <= tol:
            mu = np.zeros(k)
            mu[S] = w
            return MinNormResult(mu, objective, iterations, True)
        if j not in S:
            S.append(j)
            w = np.append(w, 0.0)
        # Minor cycle: exact affine solve, clipped back to the simplex.
        for _ in range(2 * k + 2):
            v = _affine_min_norm(M, S)
            if np.all(v > -1e-14):
                w = np.clip(v, 0.0, None)
                w /= w.sum()
                break
            neg = v < 0
            theta = float(np.min(w[neg] / (w[neg] - v[neg])))
            w = (1.0 - theta) * w + theta * v
            w[w < 1e-14] = 0.0
            keep = w > 0
            if not keep.any():
                keep[int(np.argmax(v))] = True
                w[keep] = 1.0
            S = [s for s, k_ in zip(S, keep) if k_]
            w = w[keep]
            w /= w.sum()

    mu = np.zeros(k)
    mu[S] = w
    inner = M[:, S] @ w
    return MinNormResult(mu, float(w @ inner[S]), iterations, False)


def _as_sigma(sigma, k: int) -> np.ndarray:
    arr = sigma.sigma if isinstance(sigma, ElasticFactors) else np.asarray(sigma, dtype=np.float64)
    if arr.shape != (k,):
        raise InvalidInputError(f"expected {k} elastic factors, got shape {arr.shape}")
    if np.any(arr <= 0.0):
        raise InvalidInputError("elastic factors must be positive")
    return arr


def _combine(bundle: GradientBundle, lam: np.ndarray, res: MinNormResult) -> CombinationResult:
    direction = lam @ bundle.grads
    objective = float(direction @ direction)
    degenerate = tuple(
        tid for tid, n in zip(bundle.task_ids, bundle.norms()) if n == 0.0
    )
    return CombinationResult(
        lam=lam,
        direction=direction,
        objective=objective,
        alpha=-objective,
        iterations=res.iterations,
        converged=res.converged,
        degenerate_tasks=degenerate,
    )


def solve_emgd(
    bundle: GradientBundle,
    sigma,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> CombinationResult:
    """Elastic combination: min ||sum lambda_i g_i||^2 s.t. sum lambda_i sigma_i = 1.

    Substituting mu_i = lambda_i * sigma_i turns the problem into the plain
    min-norm point of {g_i / sigma_i}; the weights are recovered as
    mu_i / sigma_i. On a converged solve the direction satisfies
    <g_i / sigma_i, d> >= ||d||^2 - tol for every i.
    """
    s = _as_sigma(sigma, bundle.size)
    scaled = bundle.grads / s[:, None]
    res = solve_min_norm_simplex(scaled, tol=tol, max_iter=max_iter)
    return _combine(bundle, res.mu / s, res)


def solve_mgda(
    bundle: GradientBundle,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> CombinationResult:
    """Uniform-constraint combination (all elastic factors equal to one)."""
    res = solve_min_norm_simplex(bundle.grads, tol=tol, max_iter=max_iter)
    return _combine(bundle, res.mu, res)


def avg_grad(bundle: GradientBundle) -> CombinationResult:
    """Plain average: every task weighted 1/k."""
    lam = np.full(bundle.size, 1.0 / bundle.size)
    return _combine(
        bundle, lam, MinNormResult(lam, 0.0, 0, True)
    )


def two_task_closed_form(g1, g2, sigma1: float, sigma2: float) -> TwoTaskSolution:
    """Closed-form elastic weights for exactly two gradients.

    The constrained quadratic has a piecewise solution: all weight on one
    task when the other's scaled projection dominates, otherwise the interior
    formula with denominator ||sigma2 g1 - sigma1 g2||^2. When the two scaled
    gradients coincide (denominator ~ 0) any hull point is optimal; the
    weight then goes to the smaller-norm gradient and the solution is
    flagged degenerate.
    """
    if sigma1 <= 0 or sigma2 <= 0:
        raise InvalidInputError("elastic factors must be positive")
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise InvalidInputError("gradients must share a dimension")
    g11 = float(g1 @ g1)
    g22 = float(g2 @ g2)
    g12 = float(g1 @ g2)
    den = sigma2 * sigma2 * g11 - 2.0 * sigma1 * sigma2 * g12 + sigma1 * sigma1 * g22
    if den < PARALLEL_EPS:
        if g11 < g22:
            return TwoTaskSolution(1.0 / sigma1, 0.0, True)
        return TwoTaskSolution(0.0, 1.0 / sigma2, True)
    if sigma1 * g22 < sigma2 * g12:
        return TwoTaskSolution(0.0, 1.0 / sigma2, False)
    if sigma2 * g11 < sigma1 * g12:
        return TwoTaskSolution(1.0 / sigma1, 0.0, False)
    lam1 = (sigma1 * g22 - sigma2 * g12) / den
    lam2 = (sigma2 * g11 - sigma1 * g12) / den
    return TwoTaskSolution(lam1, lam2, False)


def _simplex_grid(k: int, steps: int) -> np.ndarray:
    # All integer compositions of `steps` into k parts, scaled to sum to 1.
    combos = itertools.combinations(range(steps + k - 1), k - 1)
    cuts = np.fromiter(
        itertools.chain.from_iterable(combos), dtype=np.int64
    ).reshape(-1, k - 1)
    bounds = np.hstack(
        [
            np.full((cuts.shape[0], 1), -1, dtype=np.int64),
            cuts,
            np.full((cuts.shape[0], 1), steps + k - 1, dtype=np.int64),
        ]
    )
    parts = np.diff(bounds, axis=1) - 1
    return parts / float(steps)


def brute_force_weights(bundle: GradientBundle, sigma, grid_step: float):
    """Grid-search oracle for the elastic combination, k <= 4 only.

    Enumerates mu on the simplex at resolution ``grid_step``, maps back to
    lambda = mu / sigma and returns the best (lambda, objective) found. The
    objective is an upper bound on the true optimum with O(grid_step) gap.
    """
    if bundle.size > 4:
        raise UnsupportedSizeError(f"grid search supports k <= 4, got k={bundle.size}")
    if not (0.0 < grid_step <= 0.1):
        raise InvalidInputError("grid_step must lie in (0, 0.1]")
    s = _as_sigma(sigma, bundle.size)
    if bundle.size == 1:
        lam = np.array([1.0 / s[0]])
        d = lam @ bundle.grads
        return lam, float(d @ d)
    steps = int(round(1.0 / grid_step))
    W = _simplex_grid(bundle.size, steps)
    scaled = bundle.grads / s[:, None]
    gram = scaled @ scaled.T
    objectives = np.einsum("nk,kl,nl->n", W, gram, W)
    best = int(np.argmin(objectives))
    return W[best] / s, float(objectives[best])


def pareto_descent_check(bundle: GradientBundle, sigma, result: CombinationResult, tol: float) -> bool:
    """True iff <g_i, d> >= sigma_i * ||d||^2 - tol for every task."""
    s = _as_sigma(sigma, bundle.size)
    d = result.direction
    dd = float(d @ d)
    return bool(np.all(bundle.grads @ d >= s * dd - tol))


_REQUEST_KEYS = {"grads", "sigma_mode", "sigma", "temperature", "tol", "max_iter"}


def solve_request(doc: dict) -> dict:
    """One-shot solver call on a JSON-style document.

    Accepts {"grads": [[...], ...], "sigma_mode": "gmc"|"gs"|"fixed",
    "sigma": [...], "temperature": 1.0} and returns {"lambda", "direction",
    "objective", "converged"}. Unknown keys are rejected. In a one-shot call
    "gmc" has no momentum history, so the factors reduce to a softmax of the
    gradient norms. Uniform weighting ("fixed" with all-ones sigma) gives the
    plain min-norm combination.
    """
    if not isinstance(doc, dict):
        raise InvalidInputError("request must be a JSON object")
    unknown = set(doc) - _REQUEST_KEYS
    if unknown:
        raise InvalidInputError(f"unknown field: {sorted(unknown)[0]}")
    if "grads" not in doc:
        raise InvalidInputError("missing field: grads")
    grads = doc["grads"]
    if not isinstance(grads, list) or not grads:
        raise InvalidInputError("field grads must be a non-empty list of vectors")
    try:
        lengths = {len(g) for g in grads}
    except TypeError:
        raise InvalidInputError("field grads must be a list of vectors") from None
    if len(lengths) != 1:
        raise InvalidInputError("field grads has vectors of unequal dimension")
    bundle = GradientBundle(tuple(range(1, len(grads) + 1)), np.asarray(grads, dtype=np.float64))

    mode = doc.get("sigma_mode", "fixed")
    temperature = float(doc.get("temperature", 1.0))
    tol = float(doc.get("tol", DEFAULT_TOL))
    max_iter = int(doc.get("max_iter", DEFAULT_MAX_ITER))
    if mode == "gmc":
        state = ElasticState(temperature=temperature)
        sigma = elastic_factors_gmc(bundle, state)
    elif mode == "gs":
        sigma = elastic_factors_gs(bundle, temperature)
    elif mode == "fixed":
        raw = doc.get("sigma")
        if raw is None:
            raw = [1.0] * bundle.size
        if len(raw) != bundle.size:
            raise InvalidInputError("field sigma must match the number of gradients")
        sigma = np.asarray(raw, dtype=np.float64)
        if np.any(sigma <= 0.0):
            raise InvalidInputError("field sigma must be positive")
    else:
        raise InvalidInputError(f"unknown field value: sigma_mode={mode!r}")

    result = solve_emgd(bundle, sigma, tol=tol, max_iter=max_iter)
    return {
        "lambda": result.lam.tolist(),
        "direction": result.direction.tolist(),
        "objective": result.objective,
        "converged": bool(result.converged),
    }
