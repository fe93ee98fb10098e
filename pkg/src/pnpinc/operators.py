"""Measurement models: signals, per-block linear operators, serialization.

A forward model is an ordered list of measurement blocks acting on a common
real signal of length ``n``. Two operator kinds are supported:

* dense real matrices (``DenseBlock``), rows drawn i.i.d. Gaussian by the
  ``make_gaussian_model`` builder;
* circular convolutions with complex frequency responses (``ConvBlock``),
  whose complex output is stacked as a real vector ``[Re; Im]`` of length
  ``2n``. FFTs are unitary throughout so adjoints are exact conjugates.

Models can be built lazily: only metadata is held and any block is
regenerated on demand from the model seed, byte-identical to the eager
construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ContainerFormatError, ShapeMismatchError

__all__ = [
    "Signal",
    "DenseBlock",
    "ConvBlock",
    "ForwardModel",
    "partition_rows",
    "make_gaussian_model",
    "make_conv_model",
    "apply_block",
    "adjoint_block",
    "block_operator_norm",
    "operator_norm",
    "save_model",
    "load_model",
]

_MAGIC = b"PNPM"
_VERSION = 1
_KIND_DENSE = 0
_KIND_CONV = 1


@dataclass(frozen=True)
class Signal:
    """A real vector, optionally carrying its 2-D pixel layout.

    Parameters
    ----------
    data : array_like
        Real values; stored as a contiguous float64 vector.
    shape2d : tuple of int, optional
        ``(height, width)`` with ``height * width == data.size``.
    """

    data: np.ndarray
    shape2d: tuple[int, int] | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        object.__setattr__(self, "data", arr)
        if self.shape2d is not None:
            h, w = self.shape2d
            if h <= 0 or w <= 0 or h * w != arr.size:
                raise ShapeMismatchError(
                    f"shape2d {self.shape2d} inconsistent with length {arr.size}"
                )
            object.__setattr__(self, "shape2d", (int(h), int(w)))

    @property
    def n(self) -> int:
        return self.data.size

    def image(self) -> np.ndarray:
        """Return the 2-D view; requires shape2d."""
        if self.shape2d is None:
            raise ShapeMismatchError("signal has no 2-D layout")
        return self.data.reshape(self.shape2d)

    @classmethod
    def from_image(cls, img) -> "Signal":
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 2:
            raise ShapeMismatchError("expected a 2-D array")
        return cls(img.ravel(), img.shape)

    def validate(self) -> None:
        """Raise if the payload contains non-finite entries."""
        if not np.isfinite(self.data).all():
            raise ValueError("signal contains non-finite values")


@dataclass
class DenseBlock:
    """One dense real measurement block ``x -> matrix @ x``."""

    matrix: np.ndarray  # (m_i, n), float64
    y: np.ndarray  # (m_i,)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64).ravel()
        if self.matrix.ndim != 2:
            raise ShapeMismatchError("dense block needs a 2-D matrix")
        if self.y.size != self.matrix.shape[0]:
            raise ShapeMismatchError(
                f"y has length {self.y.size}, block has {self.matrix.shape[0]} rows"
            )

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        return self.matrix.T @ r


@dataclass
class ConvBlock:
    """Circular convolution with a complex frequency response.

    The complex output is reported as a real vector ``[Re; Im]`` of length
    ``2n``, which keeps every block a real-linear map and makes adjoints
    plain transposes. ``response`` is the frequency response on the 2-D FFT
    grid of ``shape``.
    """

    response: np.ndarray  # (h, w), complex128
    y: np.ndarray  # (2n,)
    shape: tuple[int, int]

    def __post_init__(self):
        self.response = np.ascontiguousarray(self.response, dtype=np.complex128)
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        if self.response.shape != self.shape:
            raise ShapeMismatchError("response grid does not match image shape")
        self.y = np.ascontiguousarray(self.y, dtype=np.float64).ravel()
        if self.y.size != 2 * self.in_dim:
            raise ShapeMismatchError(
                f"y has length {self.y.size}, expected {2 * self.in_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.in_dim

    def apply(self, x: np.ndarray) -> np.ndarray:
        X = scipy.fft.fft2(x.reshape(self.shape), norm="ortho")
        c = scipy.fft.ifft2(self.response * X, norm="ortho")
        return np.concatenate([c.real.ravel(), c.imag.ravel()])

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        n = self.in_dim
        w = (r[:n] + 1j * r[n:]).reshape(self.shape)
        W = scipy.fft.fft2(w, norm="ortho")
        out = scipy.fft.ifft2(np.conj(self.response) * W, norm="ortho")
        return out.real.ravel()

    def symmetrized_power(self) -> np.ndarray:
        """Frequency-domain representation of ``A^T A``.

        For real inputs the normal operator is diagonal in Fourier with the
        index-symmetrized squared magnitude ``(|H(k)|^2 + |H(-k)|^2) / 2``.
        """
        p = np.abs(self.response) ** 2
        p_neg = np.roll(np.flip(p, axis=(0, 1)), shift=(1, 1), axis=(0, 1))
        return 0.5 * (p + p_neg)


@dataclass
class ForwardModel:
    """An ordered set of measurement blocks over one signal space.

    When ``lazy`` is true no block data is held; ``block(i)`` regenerates
    block ``i`` from ``seed`` on demand (identical to eager construction).
    """

    n: int
    b: int
    kind: str  # "dense" | "conv"
    seed: int
    lazy: bool = False
    shape: tuple[int, int] | None = None  # conv kind only
    block_rows: tuple[int, ...] | None = None  # dense kind only
    blocks: list | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def block(self, i: int):
        if not 0 <= i < self.b:
            raise IndexError(f"block index {i} out of range [0, {self.b})")
        if self.blocks is not None:
            return self.blocks[i]
        if i not in self._cache:
            if self.kind == "dense":
                m_total = sum(self.block_rows)
                self._cache[i] = _generate_dense_block(
                    self.n, self.block_rows[i], m_total, self.seed, i
                )
            else:
                self._cache[i] = _generate_conv_block(self.shape, self.seed, i)
            # keep at most one regenerated block resident
            for k in [k for k in self._cache if k != i]:
                del self._cache[k]
        return self._cache[i]

    @property
    def out_dims(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return tuple(self.block_rows)
        return tuple(2 * self.n for _ in range(self.b))

    def with_measurements(self, y_full: np.ndarray) -> "ForwardModel":
        """Return a copy whose blocks carry ``y_full`` split per block."""
        if self.lazy:
            raise ValueError("cannot attach measurements to a lazy model")
        y_full = np.asarray(y_full, dtype=np.float64).ravel()
        if y_full.size != sum(self.out_dims):
            raise ShapeMismatchError(
                f"measurement length {y_full.size} != {sum(self.out_dims)}"
            )
        new_blocks = []
        off = 0
        for blk in self.blocks:
            yi = y_full[off : off + blk.out_dim]
            off += blk.out_dim
            if isinstance(blk, DenseBlock):
                new_blocks.append(DenseBlock(blk.matrix, yi))
            else:
                new_blocks.append(ConvBlock(blk.response, yi, blk.shape))
        return ForwardModel(
            n=self.n,
            b=self.b,
            kind=self.kind,
            seed=self.seed,
            lazy=False,
            shape=self.shape,
            block_rows=self.block_rows,
            blocks=new_blocks,
        )


def partition_rows(m: int, b: int) -> tuple[int, ...]:
    """Split ``m`` rows into ``b`` contiguous groups, remainder on the last."""
    if b < 1 or m < b:
        raise ShapeMismatchError(f"cannot split {m} rows into {b} blocks")
    base = m // b
    sizes = [base] * b
    sizes[-1] += m - base * b
    return tuple(sizes)


def _block_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))


def _generate_dense_block(n, m_i, m_total, seed, i) -> DenseBlock:
    rng = _block_rng(seed, i)
    mat = rng.normal(size=(m_i, n)) / np.sqrt(m_total)
    return DenseBlock(mat, np.zeros(m_i))


def _generate_conv_block(shape, seed, i) -> ConvBlock:
    """Smooth random response: a compact random kernel around the origin.

    Compact support in space gives a smooth low-pass-dominated response in
    frequency; the random complex entries supply the phase. Normalized to
    unit peak magnitude.
    """
    rng = _block_rng(seed, i)
    h, w = shape
    k = min(7, h, w)
    off = np.arange(k) - k // 2
    env = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2.0 * (k / 3.0) ** 2))
    kernel = env * (rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k)))
    embedded = np.zeros(shape, dtype=np.complex128)
    for a in range(k):
        for c in range(k):
            embedded[off[a] % h, off[c] % w] += kernel[a, c]
    response = scipy.fft.fft2(embedded)  # non-unitary: response of the kernel taps
    response /= np.max(np.abs(response))
    return ConvBlock(response, np.zeros(2 * h * w), shape)


def make_gaussian_model(
    n: int, m: int, b: int, seed: int, lazy: bool = False
) -> ForwardModel:
    """Dense Gaussian model: ``m`` rows, i.i.d. N(0, 1/m) entries, split into
    ``b`` contiguous row blocks."""
    rows = partition_rows(m, b)
    model = ForwardModel(
        n=n, b=b, kind="dense", seed=seed, lazy=lazy, block_rows=rows
    )
    if not lazy:
        model.blocks = [
            _generate_dense_block(n, rows[i], m, seed, i) for i in range(b)
        ]
    return model


def make_conv_model(
    shape: tuple[int, int], b: int, seed: int, lazy: bool = False
) -> ForwardModel:
    """Complex circular-convolution model with ``b`` random smooth responses."""
    h, w = int(shape[0]), int(shape[1])
    model = ForwardModel(
        n=h * w, b=b, kind="conv", seed=seed, lazy=lazy, shape=(h, w)
    )
    if not lazy:
        model.blocks = [_generate_conv_block((h, w), seed, i) for i in range(b)]
    return model


def apply_block(model: ForwardModel, i: int, x: np.ndarray) -> np.ndarray:
    """Measurements of block ``i``: ``A_i x``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    blk = model.block(i)
    if x.size != blk.in_dim:
        raise ShapeMismatchError(f"x has length {x.size}, block expects {blk.in_dim}")
    return blk.apply(x)


def adjoint_block(model: ForwardModel, i: int, r: np.ndarray) -> np.ndarray:
    """Adjoint of block ``i``: ``A_i^T r``."""
    r = np.asarray(r, dtype=np.float64).ravel()
    blk = model.block(i)
    if r.size != blk.out_dim:
        raise ShapeMismatchError(f"r has length {r.size}, block emits {blk.out_dim}")
    return blk.adjoint(r)


def operator_norm(block, iterations: int = 2000, rel_tol: float = 1e-10) -> float:
    """Spectral norm of one block by power iteration on ``A^T A``.

    The Rayleigh estimate is nondecreasing in the iteration count; the loop
    stops early once its relative change drops below ``rel_tol``. The change
    underestimates the remaining error by the spectral-gap factor, so the
    default tolerance sits well below what callers need.
    """
    rng = np.random.default_rng(0x9E3779B9)
    v = rng.normal(size=block.in_dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max(1, iterations)):
        av = block.apply(v)
        new_est = np.linalg.norm(av)
        w = block.adjoint(av)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if new_est > 0 and abs(new_est - est) <= rel_tol * new_est:
            return float(new_est)
        est = new_est
    return float(est)


def block_operator_norm(
    model: ForwardModel, i: int, iterations: int = 2000, rel_tol: float = 1e-10
) -> float:
    """``operator_norm`` of block ``i`` of a model."""
    return operator_norm(model.block(i), iterations=iterations, rel_tol=rel_tol)


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype("<f8").tobytes()


def save_model(model: ForwardModel, path) -> None:
    """Write a model to the self-describing binary container.

    Layout: magic ``PNPM``, version u32, kind u8, lazy u8, seed i64, n u64,
    b u64, kind dims, then (eager only) per block the little-endian f64
    payload. Lazy models store the header only.
    """
    kind_tag = _KIND_DENSE if model.kind == "dense" else _KIND_CONV
    out = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<BB", kind_tag, 1 if model.lazy else 0),
        struct.pack("<q", model.seed),
        struct.pack("<QQ", model.n, model.b),
    ]
    if model.kind == "dense":
        out.append(struct.pack(f"<{model.b}Q", *model.block_rows))
    else:
        out.append(struct.pack("<QQ", *model.shape))
    if not model.lazy:
        for i in range(model.b):
            blk = model.block(i)
            if model.kind == "dense":
                out.append(_pack_array(blk.matrix))
            else:
                out.append(_pack_array(blk.response.real))
                out.append(_pack_array(blk.response.imag))
            out.append(_pack_array(blk.y))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.buf):
            raise ContainerFormatError("container truncated")
        out = self.buf[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_model(path) -> ForwardModel:
    """Read a model container written by ``save_model``."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != _MAGIC:
        raise ContainerFormatError("bad magic")
    (version,) = rd.unpack("<I")
    if version != _VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    kind_tag, lazy_flag = rd.unpack("<BB")
    (seed,) = rd.unpack("<q")
    n, b = rd.unpack("<QQ")
    if kind_tag == _KIND_DENSE:
        rows = rd.unpack(f"<{b}Q")
        if any(r < 1 for r in rows):
            raise ContainerFormatError("nonpositive block row count")
        model = ForwardModel(
            n=int(n),
            b=int(b),
            kind="dense",
            seed=int(seed),
            lazy=bool(lazy_flag),
            block_rows=tuple(int(r) for r in rows),
        )
        if not lazy_flag:
            model.blocks = []
            for m_i in rows:
                mat = rd.array(int(m_i) * int(n)).reshape(int(m_i), int(n))
                y = rd.array(int(m_i))
                model.blocks.append(DenseBlock(mat, y))
    elif kind_tag == _KIND_CONV:
        h, w = rd.unpack("<QQ")
        if h * w != n:
            raise ContainerFormatError("conv shape inconsistent with n")
        model = ForwardModel(
            n=int(n),
            b=int(b),
            kind="conv",
            seed=int(seed),
            lazy=bool(lazy_flag),
            shape=(int(h), int(w)),
        )
        if not lazy_flag:
            model.blocks = []
            for _ in range(int(b)):
                re = rd.array(int(n)).reshape(int(h), int(w))
                im = rd.array(int(n)).reshape(int(h), int(w))
                y = rd.array(2 * int(n))
                model.blocks.append(ConvBlock(re + 1j * im, y, (int(h), int(w))))
    else:
        raise ContainerFormatError(f"unknown kind tag {kind_tag}")
    if rd.pos != len(rd.buf):
        raise ContainerFormatError("trailing bytes in container")
    return model
