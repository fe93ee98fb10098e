"""Plug-and-play solvers: batch, incremental, and gradient baselines.

All splitting algorithms share one state ``(x, z, s, v)`` updated as

    z <- prox of the data term at (x + s)
    v <- z - s
    x <- denoise(v)
    s <- s + x - z

The batch algorithm proxes the aggregate data term; the incremental ones
prox a random minibatch average instead, which is the only difference. The
same recursion in mirrored form acts on ``v`` alone (``drs_step``); with the
matched initialization ``x0 = denoise(v0), s0 = x0 - v0`` both forms produce
identical ``v`` sequences.

Gradient baselines (``pnp_fista``, ``pnp_sgd``) replace the prox with
explicit gradient steps on the smooth L2 loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .denoisers import Denoiser
from .errors import ScheduleExhaustedError, UnsupportedCombinationError
from .fidelity import (
    FidelitySet,
    Loss,
    block_gradient,
    full_gradient,
    minibatch_prox,
    prox_full,
)
from .operators import ForwardModel

__all__ = [
    "IidUniform",
    "EpochShuffle",
    "FixedSchedule",
    "make_selector",
    "BlockSelector",
    "SolverConfig",
    "SolverState",
    "Problem",
    "IterateRecord",
    "RunTrace",
    "ALGORITHMS",
    "pnp_admm_step",
    "ipa_step",
    "drs_step",
    "matched_admm_state",
    "initial_state",
    "run",
]


# ---------------------------------------------------------------------------
# block selection


@dataclass(frozen=True)
class IidUniform:
    """Independent uniform draws over blocks."""


@dataclass(frozen=True)
class EpochShuffle:
    """Draws walk a fresh random permutation each epoch."""


@dataclass(frozen=True)
class FixedSchedule:
    """Deterministic schedule; one entry (index or index tuple) per step."""

    entries: tuple

    def __init__(self, entries):
        normalized = []
        for e in entries:
            if np.isscalar(e):
                normalized.append((int(e),))
            else:
                normalized.append(tuple(int(i) for i in e))
        object.__setattr__(self, "entries", tuple(normalized))


class BlockSelector:
    """Stateful index source for one run."""

    def __init__(self, rule, b: int, seed: int):
        if b < 1:
            raise ValueError("need at least one block")
        self.rule = rule
        self.b = b
        self._rng = np.random.default_rng(np.random.SeedSequence(seed))
        self._perm = None
        self._cursor = 0
        self._sched_pos = 0

    def select(self, p: int) -> list[int]:
        if p < 1:
            raise ValueError("minibatch size must be >= 1")
        if isinstance(self.rule, IidUniform):
            return self._rng.integers(0, self.b, size=p).tolist()
        if isinstance(self.rule, EpochShuffle):
            out = []
            while len(out) < p:
                if self._perm is None or self._cursor >= self.b:
                    self._perm = self._rng.permutation(self.b)
                    self._cursor = 0
                out.append(int(self._perm[self._cursor]))
                self._cursor += 1
            return out
        if isinstance(self.rule, FixedSchedule):
            if self._sched_pos >= len(self.rule.entries):
                raise ScheduleExhaustedError(
                    f"fixed schedule exhausted after {self._sched_pos} steps"
                )
            entry = self.rule.entries[self._sched_pos]
            self._sched_pos += 1
            for i in entry:
                if not 0 <= i < self.b:
                    raise IndexError(f"scheduled index {i} out of range")
            return list(entry)
        raise UnsupportedCombinationError(f"unknown selection rule {self.rule!r}")


def make_selector(rule, b: int, seed: int) -> BlockSelector:
    return BlockSelector(rule, b, seed)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class SolverConfig:
    gamma: float
    max_iters: int = 100
    minibatch_p: int = 1
    selection: object = field(default_factory=IidUniform)
    seed: int = 0
    prox_tol: float | None = None  # None: per-loss default from the fidelity layer
    prox_max_iters: int = 5000
    prox_engine: str = "pdhg"
    step_size: float | None = None  # gradient baselines; default 1/||A||^2
    stop_residual: float | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.minibatch_p < 1:
            raise ValueError("minibatch_p must be >= 1")


@dataclass
class SolverState:
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray
    v: np.ndarray
    k: int = 0


@dataclass
class Problem:
    model: ForwardModel
    fidelity: FidelitySet
    denoiser: Denoiser
    shape: tuple[int, int] | None = None
    truth: np.ndarray | None = None


@dataclass
class IterateRecord:
    k: int
    normalized_residual: float
    snr_db: float
    elapsed_s: float
    memory_bytes: int


@dataclass
class RunTrace:
    algorithm: str
    records: list[IterateRecord]
    terminated: str
    config: SolverConfig
    final_state: SolverState


ALGORITHMS = ("pnp_admm", "ipa", "minibatch_ipa", "pnp_fista", "pnp_sgd")


def initial_state(n: int, x0=None, s0=None) -> SolverState:
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).ravel().copy()
    s = np.zeros(n) if s0 is None else np.asarray(s0, dtype=np.float64).ravel().copy()
    return SolverState(x=x, z=x.copy(), s=s, v=x - s, k=0)


def matched_admm_state(v0: np.ndarray, den: Denoiser) -> SolverState:
    """State whose splitting run reproduces the mirrored run started at v0."""
    v0 = np.asarray(v0, dtype=np.float64).ravel()
    x = den(v0)
    s = x - v0
    return SolverState(x=x, z=x.copy(), s=s, v=v0.copy(), k=0)


# ---------------------------------------------------------------------------
# steps


def _splitting_update(state, den, z):
    v = z - state.s
    x = den(v)
    s = state.s + x - z
    return SolverState(x=x, z=z, s=s, v=v, k=state.k + 1)


def pnp_admm_step(
    state: SolverState,
    fs: FidelitySet,
    den: Denoiser,
    cfg: SolverConfig,
    warm: dict | None = None,
) -> SolverState:
    """One batch step: prox of the aggregate data term, then denoise."""
    z = prox_full(
        fs, cfg.gamma, state.x + state.s, cfg.prox_tol, cfg.prox_max_iters,
        warm, cfg.prox_engine,
    )
    return _splitting_update(state, den, z)


def ipa_step(
    state: SolverState,
    fs: FidelitySet,
    den: Denoiser,
    cfg: SolverConfig,
    indices,
    warm: dict | None = None,
) -> SolverState:
    """One incremental step: minibatch-averaged block prox, then denoise."""
    z = minibatch_prox(
        fs, cfg.gamma, state.x + state.s, indices, cfg.prox_tol,
        cfg.prox_max_iters, warm, cfg.prox_engine,
    )
    return _splitting_update(state, den, z)


def drs_step(
    v: np.ndarray,
    fs: FidelitySet,
    den: Denoiser,
    cfg: SolverConfig,
    indices=None,
    warm: dict | None = None,
):
    """Mirrored form acting on ``v`` alone; returns ``(v_new, x, z)``."""
    x = den(v)
    u = 2.0 * x - v
    if indices is None:
        z = prox_full(
            fs, cfg.gamma, u, cfg.prox_tol, cfg.prox_max_iters, warm,
            cfg.prox_engine,
        )
    else:
        z = minibatch_prox(
            fs, cfg.gamma, u, indices, cfg.prox_tol, cfg.prox_max_iters, warm,
            cfg.prox_engine,
        )
    return v + z - x, x, z


# ---------------------------------------------------------------------------
# full runs


def _default_step(fs: FidelitySet) -> float:
    b_norm = max(fb.op_norm() for fb in fs.blocks)
    if b_norm == 0.0:
        return 1.0
    return 1.0 / b_norm**2


def run(
    algorithm: str,
    problem: Problem,
    cfg: SolverConfig,
    callbacks=(),
    analyze: bool = False,
    x0=None,
    s0=None,
) -> RunTrace:
    """Run a solver for ``cfg.max_iters`` iterations and record diagnostics.

    ``analyze=True`` additionally evaluates the true fixed-point residual
    each iteration (one aggregate prox per iteration on top of the step
    itself). SNR against ``problem.truth`` is recorded when available.
    """
    if algorithm not in ALGORITHMS:
        raise UnsupportedCombinationError(f"unknown algorithm {algorithm!r}")
    fs = problem.fidelity
    den = problem.denoiser
    n = fs.n
    grad_based = algorithm in ("pnp_fista", "pnp_sgd")
    if grad_based and fs.uniform_loss() is Loss.L1:
        raise UnsupportedCombinationError(f"{algorithm} needs the smooth L2 loss")
    if algorithm in ("ipa", "pnp_sgd") and cfg.minibatch_p != 1:
        cfg = replace(cfg, minibatch_p=1)
    state = initial_state(n, x0, s0)
    selector = make_selector(cfg.selection, fs.b, cfg.seed)
    mem_total = analysis.memory_report(
        problem.model,
        algorithm,
        cfg.minibatch_p if algorithm in ("ipa", "minibatch_ipa", "pnp_sgd") else None,
    )["total"]
    warm: dict = {}
    analysis_warm: dict = {}
    step = cfg.step_size if cfg.step_size is not None else (
        _default_step(fs) if grad_based else None
    )

    snr_fn = None
    if problem.truth is not None:
        from .harness import snr_affine

        snr_fn = snr_affine

    records: list[IterateRecord] = []
    terminated = "max_iters"
    fista_t = 1.0
    fista_prev_x = state.x.copy()
    t_start = time.perf_counter()
    for _ in range(cfg.max_iters):
        if algorithm == "pnp_admm":
            new_state = pnp_admm_step(state, fs, den, cfg, warm)
            move = new_state.x - new_state.z
        elif algorithm in ("ipa", "minibatch_ipa"):
            idx = selector.select(cfg.minibatch_p)
            new_state = ipa_step(state, fs, den, cfg, idx, warm)
            move = new_state.x - new_state.z
        elif algorithm == "pnp_fista":
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * fista_t * fista_t))
            w = state.x + ((fista_t - 1.0) / t_new) * (state.x - fista_prev_x)
            z = w - step * full_gradient(fs, w)
            x = den(z)
            fista_prev_x = state.x
            fista_t = t_new
            new_state = SolverState(x=x, z=z, s=np.zeros(n), v=x.copy(), k=state.k + 1)
            move = x - state.x
        else:  # pnp_sgd
            i = selector.select(1)[0]
            z = state.x - step * block_gradient(fs.blocks[i], state.x)
            x = den(z)
            new_state = SolverState(x=x, z=z, s=np.zeros(n), v=x.copy(), k=state.k + 1)
            move = x - state.x
        state = new_state

        nres = np.nan
        if analyze:
            nres = analysis.normalized_residual(
                fs, den, cfg.gamma, state.v,
                tol=cfg.prox_tol, max_iters=cfg.prox_max_iters,
                warm=analysis_warm, engine=cfg.prox_engine,
            )
        snr = np.nan
        if snr_fn is not None:
            snr = snr_fn(state.x, problem.truth)
        rec = IterateRecord(
            k=state.k,
            normalized_residual=float(nres),
            snr_db=float(snr),
            elapsed_s=time.perf_counter() - t_start,
            memory_bytes=int(mem_total),
        )
        records.append(rec)
        for cb in callbacks:
            cb(state, rec)
        if cfg.stop_residual is not None:
            if float(np.linalg.norm(move)) <= cfg.stop_residual:
                terminated = "stop_residual"
                break
    return RunTrace(
        algorithm=algorithm,
        records=records,
        terminated=terminated,
        config=cfg,
        final_state=state,
    )
