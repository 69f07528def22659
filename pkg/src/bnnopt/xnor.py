"""Bit-packed +-1 linear algebra: xnor + popcount dot products, GEMM, conv.

Signs pack one per bit along the innermost axis into 64-bit words
(+1 -> 1, -1 -> 0, bit 0 = first element). The dot product of two +-1
vectors of length n is then

    2 * popcount(xnor(a, b) & valid_mask) - n

because xnor counts the agreeing positions. Every kernel here is bit-exact
against the float product of the unpacked sign tensors; there is no
tolerance anywhere.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

WORD = 64


def _popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


@dataclass(frozen=True)
class BitTensor:
    """Sign tensor packed along its innermost axis.

    words has shape shape[:-1] + (n_words,); padding bits past valid_bits
    in the final word are always zero.
    """

    shape: tuple[int, ...]
    words: np.ndarray

    @property
    def n(self) -> int:
        return self.shape[-1]

    @property
    def n_words(self) -> int:
        return self.words.shape[-1]

    @property
    def valid_bits(self) -> int:
        """Meaningful bits in the final word of each row."""
        return self.n - (self.n_words - 1) * WORD


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., n) array of 0/1 values into (..., ceil(n/64)) uint64."""
    n = bits.shape[-1]
    n_words = max(1, -(-n // WORD))
    padded = np.zeros(bits.shape[:-1] + (n_words * WORD,), dtype=np.uint64)
    padded[..., :n] = bits
    shifts = np.arange(WORD, dtype=np.uint64)
    grouped = padded.reshape(bits.shape[:-1] + (n_words, WORD))
    return np.bitwise_or.reduce(grouped << shifts, axis=-1)


def pack_bits(x) -> BitTensor:
    """Pack a +-1 tensor; raises naming the first non-binary index."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise ShapeError("pack_bits: scalar input has no axis to pack")
    bad = np.abs(x) != 1.0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"pack_bits: element at index {idx} is {x[idx]!r}, not +-1")
    return BitTensor(shape=x.shape, words=_pack_rows((x > 0).astype(np.uint64)))


def unpack_bits(bt: BitTensor) -> np.ndarray:
    """Inverse of pack_bits; exact round-trip."""
    shifts = np.arange(WORD, dtype=np.uint64)
    bits = (bt.words[..., :, None] >> shifts) & np.uint64(1)
    flat = bits.reshape(bt.shape[:-1] + (bt.n_words * WORD,))[..., : bt.n]
    return np.where(flat == 1, 1.0, -1.0)


def _tail_mask(n: int, n_words: int) -> np.ndarray:
    """All-ones words with the final word masked to the valid bits."""
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    valid = n - (n_words - 1) * WORD
    if valid < WORD:
        mask[-1] = np.uint64((1 << valid) - 1)
    return mask


def _dot_words(a: np.ndarray, b: np.ndarray, mask: np.ndarray, n) -> np.ndarray:
    # xnor sets the padding bits, so the mask is applied after complement
    agree = _popcount(~(a ^ b) & mask).sum(axis=-1, dtype=np.int64)
    return 2 * agree - n


def xnor_dot(a: BitTensor, b: BitTensor) -> int:
    """Integer dot product of two packed +-1 vectors."""
    if a.shape != b.shape or len(a.shape) != 1:
        raise ShapeError(f"xnor_dot: need equal-length vectors, got {a.shape} and {b.shape}")
    mask = _tail_mask(a.n, a.n_words)
    return int(_dot_words(a.words, b.words, mask, a.n))


def _transpose(bt: BitTensor) -> BitTensor:
    # O(K*N) repacking; keeps the hot loop word-parallel along the
    # reduction axis.
    return pack_bits(unpack_bits(bt).T)


def xnor_gemm(a: BitTensor, b: BitTensor) -> np.ndarray:
    """Integer matrix product of packed sign matrices (M,K) x (K,N)."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"xnor_gemm: need 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"xnor_gemm: inner extents differ, {a.shape} x {b.shape}")
    bt = _transpose(b)  # (N, K) packed along K
    mask = _tail_mask(a.n, a.n_words)
    k = a.shape[1]
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.int64)
    for i in range(a.shape[0]):
        out[i] = _dot_words(a.words[i][None, :], bt.words, mask, k)
    return out


def xnor_conv2d(inputs: BitTensor, kernels: BitTensor, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Integer 2-D convolution of packed sign tensors.

    inputs (N,C,H,W), kernels (F,C,kh,kw). Padded positions are excluded
    from the popcount window instead of being given a fictitious sign, so
    the result equals a zero-padded float convolution of the sign tensors.
    """
    if len(inputs.shape) != 4 or len(kernels.shape) != 4:
        raise ShapeError(
            f"xnor_conv2d: need 4-D input and kernels, got {inputs.shape} and {kernels.shape}"
        )
    if inputs.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"xnor_conv2d: channel mismatch, input {inputs.shape} vs kernels {kernels.shape}"
        )
    if stride < 1:
        raise ShapeError(f"xnor_conv2d: stride must be >= 1, got {stride}")
    x = unpack_bits(inputs)
    w = unpack_bits(kernels)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"xnor_conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} "
            f"with stride={stride} padding={padding}"
        )

    # Gather patches over the padded grid, tracking which positions are real.
    length = c * kh * kw
    patches = np.zeros((n, ho, wo, length))
    valid = np.zeros((ho, wo, length), dtype=bool)
    for oy in range(ho):
        for ox in range(wo):
            col = 0
            for cc in range(c):
                for ky in range(kh):
                    iy = oy * stride - padding + ky
                    for kx in range(kw):
                        ix = ox * stride - padding + kx
                        if 0 <= iy < h and 0 <= ix < wd:
                            patches[:, oy, ox, col] = x[:, cc, iy, ix]
                            valid[oy, ox, col] = True
                        col += 1
    # pad slots hold 0.0 here; map them to bit 0 and mask them out below
    patch_bits = _pack_rows((patches > 0).astype(np.uint64))
    mask_bits = _pack_rows(valid.astype(np.uint64))
    kern_bits = _pack_rows((w.reshape(f, length) > 0).astype(np.uint64))
    counts = _popcount(mask_bits).sum(axis=-1, dtype=np.int64)  # (ho, wo)

    out = np.empty((n, f, ho, wo), dtype=np.int64)
    for i in range(n):
        for j in range(f):
            agree = _popcount(~(patch_bits[i] ^ kern_bits[j]) & mask_bits)
            out[i, j] = 2 * agree.sum(axis=-1, dtype=np.int64) - counts
    return out


def bench_gemm(m: int, k: int, n: int, repeats: int = 3, rng=None) -> dict:
    """Wall-clock one xnor GEMM against the float GEMM of the same signs.

    Packing/transposition happens outside the timed region; the numbers
    are informational (no pass threshold).
    """
    rng = rng or np.random.default_rng(0)
    a = np.where(rng.random((m, k)) < 0.5, -1.0, 1.0)
    b = np.where(rng.random((k, n)) < 0.5, -1.0, 1.0)
    ab = pack_bits(a)
    bb = pack_bits(b.T)  # pre-transposed packing, reduction axis innermost
    mask = _tail_mask(ab.n, ab.n_words)

    def run_xnor():
        out = np.empty((m, n), dtype=np.int64)
        for i in range(m):
            out[i] = _dot_words(ab.words[i][None, :], bb.words, mask, k)
        return out

    def run_float():
        return a @ b

    best_xnor = min(_time_ns(run_xnor) for _ in range(repeats))
    best_float = min(_time_ns(run_float) for _ in range(repeats))
    assert np.array_equal(run_xnor(), run_float().astype(np.int64))
    return {"M": m, "K": k, "N": n, "xnor_ns": best_xnor, "float_ns": best_float}


def _time_ns(fn) -> int:
    start = time.perf_counter_ns()
    fn()
    return time.perf_counter_ns() - start
