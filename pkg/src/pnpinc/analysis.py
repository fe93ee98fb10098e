"""Executable convergence theory: fixed-point maps, bounds, memory accounting.

The splitting iteration is driven by the displacement map

    S(v) = denoise(v) - prox_full(2 * denoise(v) - v)

whose zeros are exactly the solver's fixed points; the incremental variants
use per-block/minibatch proxes in place of the aggregate one. The bound
functions evaluate the convergence guarantees for these iterations:

* ``theorem2_bound``: deterministic batch decay ``(R + 2*gamma*L)^2 / t`` of
  the running mean of ``||S(v^k)||^2``.
* ``theorem1_bound``: the incremental version, which adds the block-variance
  plateau ``max(gamma, gamma^2) * (4*L*R + 12*L^2)``.
* ``theorem3_eta``: the linear contraction factor available when every data
  term is strongly convex and the denoiser's removed part is a contraction,
  with its validity condition.

All evaluators are pure; ``warm`` dicts only carry inner-solver starting
points and never change results beyond the stated tolerances.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .denoisers import Denoiser
from .errors import ShapeMismatchError
from .fidelity import FidelitySet, minibatch_prox, prox_full
from .operators import ForwardModel

__all__ = [
    "TheoryParams",
    "BoundReport",
    "apply_S",
    "apply_S_block",
    "normalized_residual",
    "theorem1_bound",
    "theorem2_bound",
    "theorem3_eta",
    "theorem3_envelope",
    "lemma_iterate_radius",
    "block_deviation_bound",
    "fixed_point_residuals",
    "memory_report",
    "bound_report",
]


@dataclass(frozen=True)
class TheoryParams:
    """Measured quantities the bounds are evaluated at.

    ``radius`` bounds the distance of denoised iterates to a fixed point,
    ``lipschitz`` the per-block subgradient norms over the visited region.
    ``strong_convexity`` and ``epsilon`` (denoiser residual contraction
    factor) are only needed for the linear-rate result.
    """

    gamma: float
    lipschitz: float
    radius: float
    horizon: int
    strong_convexity: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.lipschitz < 0 or self.radius < 0:
            raise ValueError("lipschitz and radius must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class BoundReport:
    theorem: str
    bound: float
    params: dict
    empirical: float | None = None
    satisfied: bool | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# fixed-point maps


def apply_S(
    fs: FidelitySet,
    den: Denoiser,
    gamma: float,
    v: np.ndarray,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> np.ndarray:
    """Displacement ``S(v)`` of the batch iteration; zero exactly at fixed
    points."""
    v = np.asarray(v, dtype=np.float64).ravel()
    x = den(v)
    z = prox_full(fs, gamma, 2.0 * x - v, tol, max_iters, warm, engine)
    return x - z


def apply_S_block(
    fs: FidelitySet,
    den: Denoiser,
    gamma: float,
    v: np.ndarray,
    indices,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> np.ndarray:
    """Displacement of one incremental step driven by ``indices``."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if np.isscalar(indices):
        indices = [int(indices)]
    x = den(v)
    z = minibatch_prox(fs, gamma, 2.0 * x - v, indices, tol, max_iters, warm, engine)
    return x - z


def normalized_residual(
    fs: FidelitySet,
    den: Denoiser,
    gamma: float,
    v: np.ndarray,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> float:
    """``||S(v)||^2 / ||v||^2`` (raises on ``v = 0``)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    vn2 = float(v @ v)
    if vn2 == 0.0:
        raise ShapeMismatchError("normalized residual undefined at v = 0")
    s = apply_S(fs, den, gamma, v, tol, max_iters, warm, engine)
    return float(s @ s) / vn2


# ---------------------------------------------------------------------------
# bounds


def theorem2_bound(params: TheoryParams) -> float:
    """Batch running-mean bound ``(R + 2*gamma*L)^2 / t``."""
    g, lip, rad = params.gamma, params.lipschitz, params.radius
    return (rad + 2.0 * g * lip) ** 2 / params.horizon


def theorem1_bound(params: TheoryParams) -> float:
    """Incremental running-mean bound: batch decay plus the variance
    plateau ``max(gamma, gamma^2) * (4*L*R + 12*L^2)``."""
    g, lip, rad = params.gamma, params.lipschitz, params.radius
    plateau = max(g, g * g) * (4.0 * lip * rad + 12.0 * lip * lip)
    return theorem2_bound(params) + plateau


def theorem3_eta(params: TheoryParams) -> tuple[float, bool]:
    """Linear contraction factor and whether its validity condition holds.

    Requires every block strongly convex (modulus ``M``) and a denoiser of
    the form identity-minus-``epsilon``-contraction. Returns ``(eta, ok)``
    where ``ok`` is the condition ``epsilon / (gamma*M*(1 + eps - 2 eps^2)) < 1``.
    """
    if params.strong_convexity is None or params.epsilon is None:
        raise ValueError("theorem3 needs strong_convexity and epsilon")
    m = params.strong_convexity
    eps = params.epsilon
    if m <= 0:
        raise ValueError("strong convexity modulus must be positive")
    if not 0.0 < eps < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    gm = params.gamma * m
    eta = (1.0 + eps + eps * gm + 2.0 * eps * eps * gm) / (
        1.0 + gm + 2.0 * eps * gm
    )
    ok = eps / (gm * (1.0 + eps - 2.0 * eps * eps)) < 1.0
    return float(eta), bool(ok)


def theorem3_envelope(params: TheoryParams, k: int) -> float:
    """Distance envelope ``eta^k (2R + 4*gamma*L) + 4*gamma*L / (1 - eta)``."""
    eta, _ = theorem3_eta(params)
    if eta >= 1.0:
        return np.inf
    g, lip, rad = params.gamma, params.lipschitz, params.radius
    return eta**k * (2.0 * rad + 4.0 * g * lip) + 4.0 * g * lip / (1.0 - eta)


def block_deviation_bound(params: TheoryParams) -> float:
    """Worst-case gap ``2*gamma*L`` between one block step and the batch
    step."""
    return 2.0 * params.gamma * params.lipschitz


def lemma_iterate_radius(vs, v_star: np.ndarray) -> float:
    """``max_k ||v^k - v*||`` over a trajectory; compare to R + 2*gamma*L."""
    v_star = np.asarray(v_star, dtype=np.float64).ravel()
    return float(max(np.linalg.norm(np.asarray(v).ravel() - v_star) for v in vs))


def fixed_point_residuals(den: Denoiser, vs, xs):
    """Diagnostic series: ``||x^k - denoise(v^k)||`` and ``||v^k - v^{k-1}||``."""
    vs = [np.asarray(v, dtype=np.float64).ravel() for v in vs]
    xs = [np.asarray(x, dtype=np.float64).ravel() for x in xs]
    if len(vs) != len(xs):
        raise ShapeMismatchError("need one x per v")
    den_fix = [float(np.linalg.norm(x - den(v))) for v, x in zip(vs, xs)]
    v_steps = [np.nan] + [
        float(np.linalg.norm(b - a)) for a, b in zip(vs[:-1], vs[1:])
    ]
    return den_fix, v_steps


# ---------------------------------------------------------------------------
# memory accounting

_BATCH = ("pnp_admm", "pnp_fista")
_INCREMENTAL = ("ipa", "minibatch_ipa", "pnp_sgd")

# per-pixel byte costs per held block, complex-channel storage convention:
# the real and imaginary response channels each held as complex128 and the
# stacked measurement as complex128 pairs; plus 16 image-size f64 vectors of
# fixed per-image state.
_A_REAL_B = 16
_A_IMAG_B = 16
_Y_B = 32
_OTHERS_B = 128


def memory_report(model: ForwardModel, algorithm: str, p: int | None = None) -> dict:
    """Nominal working-set bytes for one solver on one model.

    Batch algorithms hold all ``b`` blocks, incremental ones hold only the
    ``p`` blocks of the current minibatch. Returned keys: ``a_real``,
    ``a_imag``, ``y``, ``others``, ``total``.
    """
    if algorithm in _BATCH:
        held = model.b
    elif algorithm in _INCREMENTAL:
        held = 1 if p is None else int(p)
        if not 1 <= held <= model.b:
            raise ValueError(f"p must lie in [1, {model.b}]")
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    n = model.n
    if model.kind == "conv":
        rep = {
            "a_real": held * n * _A_REAL_B,
            "a_imag": held * n * _A_IMAG_B,
            "y": held * n * _Y_B,
            "others": n * _OTHERS_B,
        }
    else:
        rows = sorted(model.block_rows, reverse=True)
        held_rows = sum(rows[:held]) if held < model.b else sum(rows)
        rep = {
            "a_real": held_rows * n * 8,
            "a_imag": 0,
            "y": held_rows * 8,
            "others": n * _OTHERS_B,
        }
    rep["total"] = sum(rep.values())
    return rep


def bound_report(
    theorem: str, params: TheoryParams, empirical: float | None = None
) -> BoundReport:
    """Evaluate one named bound at the given parameters."""
    if theorem == "theorem1":
        value = theorem1_bound(params)
    elif theorem == "theorem2":
        value = theorem2_bound(params)
    elif theorem == "theorem3":
        eta, ok = theorem3_eta(params)
        value = eta if ok else np.inf
    else:
        raise ValueError(f"unknown theorem {theorem!r}")
    satisfied = None if empirical is None else bool(empirical <= value)
    return BoundReport(
        theorem=theorem,
        bound=float(value),
        params=asdict(params),
        empirical=empirical,
        satisfied=satisfied,
    )
