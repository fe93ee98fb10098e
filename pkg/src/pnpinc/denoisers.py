"""Denoising operators and averagedness certification.

All denoisers are deterministic maps on real vectors with a fixed 2-D pixel
layout, built to be (or wrap into) firmly nonexpansive operators:

* ``TvChambolle``: total-variation smoothing via the dual projection loop
  (compiled kernel when available), strength tied to ``sigma**2``.
* ``DctSoftThreshold``: soft-thresholding of orthonormal 2-D DCT
  coefficients; the DC coefficient is never shrunk, so constants pass
  through unchanged.
* ``AveragedWrap``: halves a nonexpansive base into ``(I + base)/2``.
* ``ScaledSmoothing``: ``v - epsilon * H v`` for a fixed 1-Lipschitz
  high-pass convolution ``H``, so the removed component is an
  ``epsilon``-contraction.
* ``BoxProjection``: optional clamp wrapper, disabled unless explicitly
  applied.

``certify_firm_nonexpansive`` and ``certify_contraction`` probe any operator
with random pairs and report worst-case violations; they are falsification
checks, not proofs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.fft

from .errors import NonConvergenceError, ShapeMismatchError

try:
    from . import _tv_core as _tv_backend
except ImportError:  # compiled kernel unavailable, e.g. pure install
    from . import _tv_numpy as _tv_backend

__all__ = [
    "tv_backend_name",
    "Denoiser",
    "TvChambolle",
    "DctSoftThreshold",
    "AveragedWrap",
    "ScaledSmoothing",
    "BoxProjection",
    "CertificationReport",
    "certify_firm_nonexpansive",
    "certify_contraction",
]


def tv_backend_name() -> str:
    """Which TV kernel is active: "cython" or "numpy"."""
    return _tv_backend.BACKEND


def _resolve_shape(n: int, shape) -> tuple[int, int]:
    if shape is not None:
        h, w = int(shape[0]), int(shape[1])
        if h * w != n:
            raise ShapeMismatchError(f"shape {shape} inconsistent with length {n}")
        return h, w
    r = int(round(np.sqrt(n)))
    if r * r == n:
        return r, r
    return 1, n


class Denoiser:
    """Base class: a callable ``v -> denoised v`` on flat vectors."""

    sigma: float
    shape: tuple[int, int] | None

    def denoise(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def residual(self, v: np.ndarray) -> np.ndarray:
        """The removed component ``v - denoise(v)``."""
        v = np.asarray(v, dtype=np.float64).ravel()
        return v - self.denoise(v)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.denoise(v)

    @property
    def label(self) -> str:
        return type(self).__name__


class TvChambolle(Denoiser):
    """Total-variation denoiser, the prox of ``sigma**2 * TV`` at strength 1.

    The dual loop stops at ``dual_tol`` (max dual update) or ``max_iters``;
    with ``strict=True`` hitting the cap raises ``NonConvergenceError``
    carrying the final dual change.
    """

    def __init__(self, sigma, shape=None, max_iters=200, dual_tol=1e-8,
                 tau=0.25, strict=False):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.shape = tuple(shape) if shape is not None else None
        self.max_iters = int(max_iters)
        self.dual_tol = float(dual_tol)
        self.tau = float(tau)
        self.strict = strict
        self.last_iterations = 0
        self.last_change = np.nan

    def denoise(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).ravel()
        h, w = _resolve_shape(v.size, self.shape)
        lam = self.sigma**2
        x, iters, change = _tv_backend.tv_dual_iterate(
            v.reshape(h, w), lam, self.tau, self.max_iters, self.dual_tol
        )
        self.last_iterations = iters
        self.last_change = change
        if self.strict and change > self.dual_tol:
            raise NonConvergenceError(
                f"TV dual loop stopped at change {change:.3e} "
                f"after {iters} iterations",
                last_iterate=np.asarray(x).ravel(),
                gap=change,
                iterations=iters,
            )
        return np.asarray(x).ravel()


class DctSoftThreshold(Denoiser):
    """Soft-threshold of orthonormal 2-D DCT coefficients by ``sigma``."""

    def __init__(self, sigma, shape=None):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.shape = tuple(shape) if shape is not None else None

    def denoise(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).ravel()
        h, w = _resolve_shape(v.size, self.shape)
        coef = scipy.fft.dctn(v.reshape(h, w), norm="ortho")
        dc = coef[0, 0]
        coef = np.sign(coef) * np.maximum(np.abs(coef) - self.sigma, 0.0)
        coef[0, 0] = dc
        return scipy.fft.idctn(coef, norm="ortho").ravel()


class AveragedWrap(Denoiser):
    """Half-average ``(I + base)/2`` of a nonexpansive base operator."""

    def __init__(self, base: Denoiser):
        self.base = base
        self.sigma = getattr(base, "sigma", 1.0)
        self.shape = getattr(base, "shape", None)

    def denoise(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).ravel()
        return 0.5 * (v + self.base.denoise(v))

    @property
    def label(self) -> str:
        return f"AveragedWrap({self.base.label})"


class ScaledSmoothing(Denoiser):
    """``v - epsilon * H v`` with ``H`` a fixed 1-Lipschitz high-pass filter.

    ``H = (I - P) / 2`` where ``P`` is the circular 3x3 box blur; its
    frequency response lies in [0, 1], so the removed map ``epsilon * H`` is
    a linear ``epsilon``-contraction and the denoiser is firmly nonexpansive
    for ``epsilon`` in (0, 1).
    """

    def __init__(self, epsilon, shape=None, sigma=1.0):
        if not 0.0 < epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        self.epsilon = float(epsilon)
        self.sigma = float(sigma)
        self.shape = tuple(shape) if shape is not None else None
        self._resp_cache = {}

    def highpass_response(self, shape) -> np.ndarray:
        """Real frequency response of ``H`` on the given grid."""
        shape = (int(shape[0]), int(shape[1]))
        if shape not in self._resp_cache:
            h, w = shape
            kern = np.zeros((h, w))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    kern[di % h, dj % w] += 1.0 / 9.0
            blur = scipy.fft.fft2(kern).real
            self._resp_cache[shape] = 0.5 * (1.0 - blur)
        return self._resp_cache[shape]

    def removed(self, v: np.ndarray) -> np.ndarray:
        """The contraction part ``epsilon * H v``."""
        v = np.asarray(v, dtype=np.float64).ravel()
        h, w = _resolve_shape(v.size, self.shape)
        resp = self.highpass_response((h, w))
        V = scipy.fft.fft2(v.reshape(h, w))
        out = scipy.fft.ifft2(resp * V).real.ravel()
        return self.epsilon * out

    def denoise(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).ravel()
        return v - self.removed(v)


class BoxProjection(Denoiser):
    """Clamp a base denoiser's output to ``[lo, hi]``."""

    def __init__(self, base: Denoiser, lo=0.0, hi=255.0):
        if lo >= hi:
            raise ValueError("need lo < hi")
        self.base = base
        self.lo = float(lo)
        self.hi = float(hi)
        self.sigma = getattr(base, "sigma", 1.0)
        self.shape = getattr(base, "shape", None)

    def denoise(self, v: np.ndarray) -> np.ndarray:
        return np.clip(self.base.denoise(v), self.lo, self.hi)

    @property
    def label(self) -> str:
        return f"BoxProjection({self.base.label})"


# ---------------------------------------------------------------------------
# certification


@dataclass
class CertificationReport:
    op_label: str
    sampled_pairs: int
    max_cocoercivity_violation: float
    max_lipschitz_ratio: float
    verdict: str  # "pass" | "fail"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _default_samplers():
    def uniform_box(rng, n):
        return rng.uniform(0.0, 255.0, size=n)

    def gaussian(rng, n):
        return rng.normal(127.0, 60.0, size=n)

    return (uniform_box, gaussian)


def certify_firm_nonexpansive(
    op,
    n: int,
    samples: int = 1000,
    seed: int = 0,
    tolerance: float = 1e-6,
    samplers=None,
    label: str | None = None,
) -> CertificationReport:
    """Random-pair falsification of firm nonexpansiveness.

    For pairs ``(v1, v2)`` the report tracks the worst normalized violation
    of ``<T v1 - T v2, v1 - v2> >= ||T v1 - T v2||^2`` (normalization
    ``1 + ||v1 - v2||^2`` keeps the scale of float error) and the worst
    Lipschitz ratio. Verdict "pass" means neither exceeded ``tolerance``.
    """
    rng = np.random.default_rng(seed)
    samplers = tuple(samplers) if samplers is not None else _default_samplers()
    max_vio = 0.0
    max_ratio = 0.0
    for k in range(samples):
        draw = samplers[k % len(samplers)]
        v1 = draw(rng, n)
        v2 = draw(rng, n)
        dv = v1 - v2
        dvn2 = float(dv @ dv)
        if dvn2 == 0.0:
            continue
        dt = np.asarray(op(v1)) - np.asarray(op(v2))
        dtn2 = float(dt @ dt)
        inner = float(dt @ dv)
        vio = (dtn2 - inner) / (1.0 + dvn2)
        ratio = np.sqrt(dtn2 / dvn2)
        max_vio = max(max_vio, vio)
        max_ratio = max(max_ratio, ratio)
    verdict = "pass" if (max_vio <= tolerance and max_ratio <= 1.0 + tolerance) else "fail"
    if label is None:
        label = getattr(op, "label", None) or getattr(type(op), "__name__", "operator")
    return CertificationReport(
        op_label=label,
        sampled_pairs=samples,
        max_cocoercivity_violation=max_vio,
        max_lipschitz_ratio=max_ratio,
        verdict=verdict,
    )


def certify_contraction(
    op,
    n: int,
    samples: int = 1000,
    seed: int = 0,
    samplers=None,
    label: str | None = None,
) -> CertificationReport:
    """Estimate the worst Lipschitz ratio of ``op`` over random pairs.

    The ratio is reported in ``max_lipschitz_ratio``; callers compare it to
    their expected contraction factor. Verdict "pass" means ratio <= 1.
    """
    rng = np.random.default_rng(seed)
    samplers = tuple(samplers) if samplers is not None else _default_samplers()
    max_ratio = 0.0
    for k in range(samples):
        draw = samplers[k % len(samplers)]
        v1 = draw(rng, n)
        v2 = draw(rng, n)
        dv = v1 - v2
        dvn = float(np.linalg.norm(dv))
        if dvn == 0.0:
            continue
        dt = np.asarray(op(v1)) - np.asarray(op(v2))
        max_ratio = max(max_ratio, float(np.linalg.norm(dt)) / dvn)
    if label is None:
        label = getattr(op, "label", None) or getattr(type(op), "__name__", "operator")
    return CertificationReport(
        op_label=label,
        sampled_pairs=samples,
        max_cocoercivity_violation=np.nan,
        max_lipschitz_ratio=max_ratio,
        verdict="pass" if max_ratio <= 1.0 else "fail",
    )
