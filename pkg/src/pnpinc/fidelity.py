"""Data-fidelity blocks and their proximal operators.

The measurement fit is a sum of per-block terms ``g_i`` built on one forward
model. Two losses are supported:

* ``Loss.L2_SQUARE``: ``g_i(x) = 0.5 * ||y_i - A_i x||_2^2``
* ``Loss.L1``:        ``g_i(x) = ||y_i - A_i x||_1``

The aggregate objective is the mean ``g = (1/b) * sum_i g_i`` while per-block
proxes always use the unweighted ``g_i``; the two conventions are fixed by the
incremental solvers, which average block proxes against the full prox of the
mean.

Prox engines
------------
* L2 / dense: conjugate gradient on the normal equations,
  ``(I + w A^T A) x = z + w A^T y``, absolute residual stopping.
* L2 / convolution: exact division in Fourier space.
* L1 / structured (diagonal or orthonormal-row matrix): closed-form
  soft-threshold in the transformed domain.
* L1 / general: primal-dual iteration (default) or accelerated projected
  gradient on the dual box-QP with a cached Gram matrix (``engine="gram"``,
  faster when the same operator is proxed many times). Both stop on the same
  certificate: duality gap <= tol.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import (
    NonConvergenceError,
    ShapeMismatchError,
    UnsupportedCombinationError,
)
from .operators import ConvBlock, DenseBlock, ForwardModel, operator_norm

__all__ = [
    "Loss",
    "FidelityBlock",
    "FidelitySet",
    "build_fidelity",
    "lipschitz_bound",
    "prox_block",
    "prox_full",
    "prox_average",
    "minibatch_prox",
    "block_loss",
    "full_loss",
    "block_gradient",
    "full_gradient",
    "soft_threshold",
    "thread_limit",
]


class Loss(enum.Enum):
    L2_SQUARE = "l2_square"
    L1 = "l1"


def thread_limit() -> int:
    """Worker cap from the PNP_THREADS environment variable (default 1)."""
    raw = os.environ.get("PNP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass
class FidelityBlock:
    """One data term ``g_i`` over a measurement block."""

    block: DenseBlock | ConvBlock
    loss: Loss
    lipschitz: float | None = None
    _op_norm: float | None = field(default=None, repr=False, compare=False)
    _structure: tuple | None = field(default=None, repr=False, compare=False)
    _structure_known: bool = field(default=False, repr=False, compare=False)
    _gram: np.ndarray | None = field(default=None, repr=False, compare=False)

    def op_norm(self) -> float:
        if self._op_norm is None:
            self._op_norm = operator_norm(self.block)
        return self._op_norm

    def structure(self):
        """Detected exact structure of a dense matrix, if any.

        Returns ``("diagonal", diag)``, ``("orthonormal_rows", None)`` or
        ``None``. Cheap probes run first; the exact confirmation is only
        computed when the probes pass.
        """
        if self._structure_known:
            return self._structure
        self._structure = None
        if isinstance(self.block, DenseBlock):
            A = self.block.matrix
            m, n = A.shape
            if m == n and np.count_nonzero(A - np.diag(np.diagonal(A))) == 0:
                self._structure = ("diagonal", np.diagonal(A).copy())
            elif m <= n:
                rng = np.random.default_rng(0xC0FFEE)
                ok = True
                for _ in range(3):
                    v = rng.normal(size=m)
                    if np.linalg.norm(A @ (A.T @ v) - v) > 1e-12 * np.linalg.norm(v):
                        ok = False
                        break
                if ok and np.max(np.abs(A @ A.T - np.eye(m))) <= 1e-12:
                    self._structure = ("orthonormal_rows", None)
        self._structure_known = True
        return self._structure

    def gram(self) -> np.ndarray:
        if self._gram is None:
            if not isinstance(self.block, DenseBlock):
                raise UnsupportedCombinationError("gram engine needs a dense block")
            A = self.block.matrix
            self._gram = A @ A.T
        return self._gram


@dataclass
class FidelitySet:
    """All data terms of one problem, with shared domain metadata."""

    blocks: list[FidelityBlock]
    domain_radius: float
    _stacked: np.ndarray | None = field(default=None, repr=False, compare=False)
    _stacked_gram: np.ndarray | None = field(default=None, repr=False, compare=False)
    _conv_power_sum: np.ndarray | None = field(default=None, repr=False, compare=False)
    _adjoint_y_sum: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def b(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return self.blocks[0].block.in_dim

    def max_lipschitz(self) -> float:
        vals = []
        for fb in self.blocks:
            if fb.lipschitz is None:
                fb.lipschitz = lipschitz_bound(fb, self.domain_radius)
            vals.append(fb.lipschitz)
        return float(max(vals))

    def uniform_loss(self) -> Loss:
        losses = {fb.loss for fb in self.blocks}
        if len(losses) != 1:
            raise UnsupportedCombinationError(
                "blocks mix losses; full/minibatch proxes need a uniform loss"
            )
        return losses.pop()

    def stacked_matrix(self) -> np.ndarray:
        if self._stacked is None:
            if not all(isinstance(fb.block, DenseBlock) for fb in self.blocks):
                raise UnsupportedCombinationError("stacking needs dense blocks")
            self._stacked = np.vstack([fb.block.matrix for fb in self.blocks])
        return self._stacked

    def stacked_gram(self) -> np.ndarray:
        if self._stacked_gram is None:
            K = self.stacked_matrix()
            self._stacked_gram = K @ K.T
        return self._stacked_gram

    def stacked_y(self) -> np.ndarray:
        return np.concatenate([fb.block.y for fb in self.blocks])


def build_fidelity(
    model: ForwardModel,
    loss: Loss,
    domain_radius: float | None = None,
    compute_lipschitz: bool = True,
) -> FidelitySet:
    """Fidelity set over all blocks of a model with one shared loss."""
    if domain_radius is None:
        domain_radius = 255.0 * np.sqrt(model.n)
    blocks = [FidelityBlock(model.block(i), loss) for i in range(model.b)]
    fs = FidelitySet(blocks, float(domain_radius))
    if compute_lipschitz:
        fs.max_lipschitz()
    return fs


def lipschitz_bound(fb: FidelityBlock, domain_radius: float | None = None) -> float:
    """Subgradient-norm bound for one block.

    L1: ``||A_i|| * sqrt(m_i)`` (valid everywhere). L2: the gradient grows
    linearly, so the bound is over the ball of the given radius:
    ``||A_i|| * (||A_i|| * radius + ||y_i||)``.
    """
    nrm = fb.op_norm()
    if fb.loss is Loss.L1:
        return float(nrm * np.sqrt(fb.block.out_dim))
    if domain_radius is None:
        raise ValueError("L2 Lipschitz bound needs a domain radius")
    return float(nrm * (nrm * domain_radius + np.linalg.norm(fb.block.y)))


def block_loss(fb: FidelityBlock, x: np.ndarray) -> float:
    r = fb.block.y - fb.block.apply(x)
    if fb.loss is Loss.L1:
        return float(np.sum(np.abs(r)))
    return float(0.5 * (r @ r))


def full_loss(fs: FidelitySet, x: np.ndarray) -> float:
    return sum(block_loss(fb, x) for fb in fs.blocks) / fs.b


def block_gradient(fb: FidelityBlock, x: np.ndarray) -> np.ndarray:
    if fb.loss is not Loss.L2_SQUARE:
        raise UnsupportedCombinationError("gradient only defined for the L2 loss")
    return fb.block.adjoint(fb.block.apply(x) - fb.block.y)


def full_gradient(fs: FidelitySet, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for fb in fs.blocks:
        out += block_gradient(fb, x)
    return out / fs.b


# ---------------------------------------------------------------------------
# inner solvers


def _cg(matvec, rhs, x0, tol, max_iters):
    """Conjugate gradient; stops at residual norm <= tol * ||rhs||."""
    x = np.array(x0, dtype=np.float64, copy=True)
    scale = float(np.linalg.norm(rhs))
    thresh = tol * (scale if scale > 0.0 else 1.0)
    r = rhs - matvec(x)
    rs = float(r @ r)
    if np.sqrt(rs) <= thresh:
        return x, np.sqrt(rs), 0
    p = r.copy()
    for it in range(1, max_iters + 1):
        ap = matvec(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= thresh:
            return x, np.sqrt(rs_new), it
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise NonConvergenceError(
        f"CG stalled at relative residual {np.sqrt(rs) / (scale or 1.0):.3e} "
        f"after {max_iters} iterations",
        last_iterate=x,
        gap=np.sqrt(rs),
        iterations=max_iters,
    )


def _prox_l1_pdhg(apply_K, adjoint_K, y, weight, z, tol, max_iters, op_norm, q0):
    """min_x 0.5||x - z||^2 + weight * ||y - K x||_1 by primal-dual iteration.

    Strong convexity of the quadratic part drives the accelerated step-size
    schedule. Stops when the duality gap falls below ``tol`` (absolute).
    Returns (x, q, gap, iterations).
    """
    if op_norm == 0.0:
        return z.copy(), np.zeros_like(y), 0.0, 0
    q = np.clip(q0, -weight, weight) if q0 is not None else np.zeros_like(y)
    x = z - adjoint_K(q)
    x_bar = x
    tau = 1.0 / op_norm
    sigma = 1.0 / op_norm
    gap = np.inf
    check_every = 5
    for it in range(1, max_iters + 1):
        q = np.clip(q + sigma * (apply_K(x_bar) - y), -weight, weight)
        w = adjoint_K(q)
        x_new = (x - tau * w + tau * z) / (1.0 + tau)
        theta = 1.0 / np.sqrt(1.0 + 2.0 * tau)
        tau *= theta
        sigma /= theta
        x_bar = x_new + theta * (x_new - x)
        x = x_new
        if it % check_every == 0 or it == max_iters:
            resid = y - apply_K(x)
            primal = 0.5 * float((x - z) @ (x - z)) + weight * float(
                np.sum(np.abs(resid))
            )
            dual = -0.5 * float(w @ w) + float(w @ z) - float(q @ y)
            gap = primal - dual
            if gap <= tol:
                return x, q, gap, it
    raise NonConvergenceError(
        f"primal-dual prox stalled at gap {gap:.3e} after {max_iters} iterations",
        last_iterate=x,
        gap=gap,
        iterations=max_iters,
    )


def _prox_l1_gram(gram, adjoint_K, c, y_offset, weight, z, tol, max_iters, lip, q0):
    """Same minimizer as ``_prox_l1_pdhg`` via the dual box-QP.

    Minimizes ``0.5 q^T M q - q^T c`` over ``|q| <= weight`` with accelerated
    projected gradient (restarted), where ``M = K K^T`` and ``c = K z - y``.
    The duality gap of the pair ``(x(q), q)``, ``x(q) = z - K^T q``, is
    available from ``M q`` alone, so certification adds no matvecs. The primal
    point is reconstructed once at exit.
    """
    if lip == 0.0:
        return z.copy(), np.zeros_like(c), 0.0, 0
    q = np.clip(q0, -weight, weight) if q0 is not None else np.zeros_like(c)
    u = q.copy()
    t = 1.0
    step = 1.0 / lip
    gap = np.inf
    check_every = 5
    for it in range(1, max_iters + 1):
        grad_u = gram @ u - c
        q_new = np.clip(u - step * grad_u, -weight, weight)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        u_new = q_new + ((t - 1.0) / t_new) * (q_new - q)
        if float((u_new - q_new) @ (q_new - q)) > 0.0:
            # momentum points uphill: restart
            u_new = q_new.copy()
            t_new = 1.0
        q, u, t = q_new, u_new, t_new
        if it % check_every == 0 or it == max_iters:
            mq = gram @ q
            qmq = float(q @ mq)
            primal = 0.5 * qmq + weight * float(np.sum(np.abs(mq - c)))
            dual = -0.5 * qmq + float(q @ c)
            gap = primal - dual
            if gap <= tol:
                return z - adjoint_K(q), q, gap, it
    raise NonConvergenceError(
        f"dual prox stalled at gap {gap:.3e} after {max_iters} iterations",
        last_iterate=z - adjoint_K(q),
        gap=gap,
        iterations=max_iters,
    )


def _l1_structured(block, structure, weight, z):
    kind, data = structure
    y = block.y
    if kind == "diagonal":
        d = data
        x = z.copy()
        nz = d != 0.0
        c = y[nz] - d[nz] * z[nz]
        u = soft_threshold(c, weight * d[nz] ** 2)
        x[nz] = (y[nz] - u) / d[nz]
        return x
    # orthonormal rows: A A^T = I
    r = y - block.apply(z)
    return z + block.adjoint(np.clip(r, -weight, weight))


# ---------------------------------------------------------------------------
# public prox interface


def _prox_l2_single(block, weight, z, tol, max_iters, warm, warm_key):
    if isinstance(block, ConvBlock):
        rhs = z + weight * block.adjoint(block.y)
        denom = 1.0 + weight * block.symmetrized_power()
        X = scipy.fft.fft2(rhs.reshape(block.shape), norm="ortho")
        x = scipy.fft.ifft2(X / denom, norm="ortho").real.ravel()
        return x
    A = block.matrix

    def matvec(v):
        return v + weight * (A.T @ (A @ v))

    rhs = z + weight * (A.T @ block.y)
    x0 = warm.get(warm_key, z) if warm is not None else z
    x, _, _ = _cg(matvec, rhs, x0, tol, max_iters)
    if warm is not None:
        warm[warm_key] = x
    return x


def _prox_l1_single(fb, weight, z, tol, max_iters, warm, warm_key, engine):
    block = fb.block
    structure = fb.structure() if isinstance(block, DenseBlock) else None
    if structure is not None:
        if warm is not None:
            warm[warm_key + ("gap",)] = 0.0
        return _l1_structured(block, structure, weight, z)
    q0 = warm.get(warm_key) if warm is not None else None
    if engine == "gram" and isinstance(block, DenseBlock):
        A = block.matrix
        c = A @ z - block.y
        x, q, gap, _ = _prox_l1_gram(
            fb.gram(),
            lambda qq: A.T @ qq,
            c,
            block.y,
            weight,
            z,
            tol,
            max_iters,
            fb.op_norm() ** 2,
            q0,
        )
    else:
        x, q, gap, _ = _prox_l1_pdhg(
            block.apply,
            block.adjoint,
            block.y,
            weight,
            z,
            tol,
            max_iters,
            fb.op_norm(),
            q0,
        )
    if warm is not None:
        warm[warm_key] = q
        warm[warm_key + ("gap",)] = gap
    return x


# Default inner tolerances: CG stops at this relative residual; the L1
# primal-dual loops stop at this absolute duality gap.
CG_TOL = 1e-10
GAP_TOL = 1e-8


def _default_tol(loss: Loss) -> float:
    return CG_TOL if loss is Loss.L2_SQUARE else GAP_TOL


def prox_block(
    fb: FidelityBlock,
    gamma: float,
    z: np.ndarray,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> np.ndarray:
    """``argmin_x 0.5||x - z||^2 + gamma * g_i(x)`` for one block."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != fb.block.in_dim:
        raise ShapeMismatchError(f"z has length {z.size}, expected {fb.block.in_dim}")
    if tol is None:
        tol = _default_tol(fb.loss)
    key = ("block", id(fb))
    if fb.loss is Loss.L2_SQUARE:
        return _prox_l2_single(fb.block, gamma, z, tol, max_iters, warm, key)
    return _prox_l1_single(fb, gamma, z, tol, max_iters, warm, key, engine)


def prox_full(
    fs: FidelitySet,
    gamma: float,
    z: np.ndarray,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> np.ndarray:
    """Prox of the aggregate ``g = (1/b) sum_i g_i``.

    With a single block this is exactly ``prox_block`` (same code path, so
    the collapse is bitwise).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != fs.n:
        raise ShapeMismatchError(f"z has length {z.size}, expected {fs.n}")
    loss = fs.uniform_loss()
    if tol is None:
        tol = _default_tol(loss)
    if fs.b == 1:
        return prox_block(fs.blocks[0], gamma, z, tol, max_iters, warm, engine)
    weight = gamma / fs.b
    key = ("full", id(fs))
    if loss is Loss.L2_SQUARE:
        blocks = [fb.block for fb in fs.blocks]
        if all(isinstance(b, ConvBlock) for b in blocks):
            if fs._conv_power_sum is None:
                fs._conv_power_sum = sum(b.symmetrized_power() for b in blocks)
                fs._adjoint_y_sum = sum(b.adjoint(b.y) for b in blocks)
            rhs = z + weight * fs._adjoint_y_sum
            denom = 1.0 + weight * fs._conv_power_sum
            X = scipy.fft.fft2(rhs.reshape(blocks[0].shape), norm="ortho")
            return scipy.fft.ifft2(X / denom, norm="ortho").real.ravel()

        def matvec(v):
            acc = v.copy()
            for b in blocks:
                acc += weight * b.adjoint(b.apply(v))
            return acc

        rhs = z + weight * sum(b.adjoint(b.y) for b in blocks)
        x0 = warm.get(key, z) if warm is not None else z
        x, _, _ = _cg(matvec, rhs, x0, tol, max_iters)
        if warm is not None:
            warm[key] = x
        return x

    # aggregate L1: stacked operator with uniform weight gamma/b
    q0 = warm.get(key) if warm is not None else None
    if engine == "gram" and all(isinstance(fb.block, DenseBlock) for fb in fs.blocks):
        K = fs.stacked_matrix()
        y = fs.stacked_y()
        c = K @ z - y
        lip = _gram_norm(fs)
        x, q, gap, _ = _prox_l1_gram(
            fs.stacked_gram(),
            lambda qq: K.T @ qq,
            c,
            y,
            weight,
            z,
            tol,
            max_iters,
            lip,
            q0,
        )
    else:
        blocks = [fb.block for fb in fs.blocks]
        offsets = np.cumsum([0] + [b.out_dim for b in blocks])

        def apply_K(v):
            return np.concatenate([b.apply(v) for b in blocks])

        def adjoint_K(r):
            acc = np.zeros(fs.n)
            for b, lo, hi in zip(blocks, offsets[:-1], offsets[1:]):
                acc += b.adjoint(r[lo:hi])
            return acc

        y = fs.stacked_y()
        op_norm = float(np.sqrt(sum(fb.op_norm() ** 2 for fb in fs.blocks)))
        x, q, gap, _ = _prox_l1_pdhg(
            apply_K, adjoint_K, y, weight, z, tol, max_iters, op_norm, q0
        )
    if warm is not None:
        warm[key] = q
        warm[key + ("gap",)] = gap
    return x


_GRAM_NORMS: dict = {}


def _gram_norm(fs: FidelitySet) -> float:
    """Largest eigenvalue of the stacked Gram matrix (power iteration)."""
    key = id(fs)
    if key not in _GRAM_NORMS:
        M = fs.stacked_gram()
        rng = np.random.default_rng(0x9E3779B9)
        v = rng.normal(size=M.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(200):
            w = M @ v
            lam_new = float(v @ w)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return 0.0
            v = w / nw
            if lam > 0 and abs(lam_new - lam) <= 1e-10 * lam_new:
                lam = lam_new
                break
            lam = lam_new
        _GRAM_NORMS[key] = lam * (1.0 + 1e-12)
    return _GRAM_NORMS[key]


def minibatch_prox(
    fs: FidelitySet,
    gamma: float,
    z: np.ndarray,
    indices,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> np.ndarray:
    """Average of per-block proxes over ``indices`` (repeats allowed).

    The reduction is performed in sorted index order regardless of execution
    order, so threaded evaluation (PNP_THREADS > 1) returns the exact
    sequential result.
    """
    indices = [int(i) for i in indices]
    if len(indices) == 0:
        raise ValueError("minibatch needs at least one index")
    for i in indices:
        if not 0 <= i < fs.b:
            raise IndexError(f"block index {i} out of range [0, {fs.b})")
    fs.uniform_loss()
    ordered = sorted(indices)
    workers = min(thread_limit(), len(ordered))

    def one(i):
        return prox_block(fs.blocks[i], gamma, z, tol, max_iters, warm, engine)

    if workers > 1 and len(set(ordered)) > 1:
        unique = sorted(set(ordered))
        # warm dict access is per-block-keyed; compute unique proxes in parallel
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(unique, pool.map(one, unique)))
        values = [results[i] for i in ordered]
    else:
        cache = {}
        values = []
        for i in ordered:
            if i not in cache:
                cache[i] = one(i)
            values.append(cache[i])
    acc = np.zeros(fs.n)
    for v in values:
        acc += v
    return acc / len(ordered)


def prox_average(
    fs: FidelitySet,
    gamma: float,
    z: np.ndarray,
    tol: float | None = None,
    max_iters: int = 5000,
    warm: dict | None = None,
    engine: str = "pdhg",
) -> np.ndarray:
    """Average of all per-block proxes, ``(1/b) sum_i prox_{gamma g_i}(z)``."""
    return minibatch_prox(
        fs, gamma, z, list(range(fs.b)), tol, max_iters, warm, engine
    )
