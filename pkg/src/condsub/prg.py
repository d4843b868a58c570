"""Nisan's generator for space-bounded computation and pseudorandom subsets.

The generator expands a seed made of one S-bit start block x0 and r affine
hash keys (a_j, b_j) over GF(2^S) into N bits.  Block number k (0-based) is

    h_1^{b_1} o h_2^{b_2} o ... o h_r^{b_r} (x0),   h_j(x) = a_j * x + b_j

where b_j is bit j-1 of k, so the most significant bit of k selects the hash
applied first.  Bits inside a block are read most-significant first.

Two evaluation paths exist: plain Python integers (scalar, any S) and numba
kernels over int64 for S <= 62 (vectorised membership and hash values).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from numba import njit

from .domain import ParameterError, UsageError, ceil_log2

MAX_KERNEL_S = 62


# ---------------------------------------------------------------- GF(2^S)

def _pmod(a: int, m: int) -> int:
    dm = m.bit_length()
    while a.bit_length() >= dm:
        a ^= m << (a.bit_length() - dm)
    return a


def _pmulmod(a: int, b: int, m: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
    return _pmod(r, m)


def _pgcd(a: int, b: int) -> int:
    while b:
        a, b = b, _pmod(a, b)
    return a


def _prime_factors(n: int) -> list[int]:
    out, p = [], 2
    while p * p <= n:
        if n % p == 0:
            out.append(p)
            while n % p == 0:
                n //= p
        p += 1
    if n > 1:
        out.append(n)
    return out


def is_irreducible(poly: int) -> bool:
    """Rabin's test for a polynomial over GF(2) encoded as an int."""
    n = poly.bit_length() - 1
    if n < 1:
        return False
    if n == 1:
        return True

    def x_pow_2k(k):
        x = 0b10
        for _ in range(k):
            x = _pmulmod(x, x, poly)
        return x

    if x_pow_2k(n) != 0b10:
        return False
    for q in _prime_factors(n):
        h = x_pow_2k(n // q) ^ 0b10
        if _pgcd(poly, h) != 1:
            return False
    return True


@functools.lru_cache(maxsize=None)
def irreducible_poly(S: int) -> int:
    """Lowest-weight irreducible polynomial of degree S (trinomial if any)."""
    if S < 1:
        raise ParameterError("field degree must be >= 1")
    top = 1 << S
    for a in range(1, S):
        p = top | (1 << a) | 1
        if is_irreducible(p):
            return p
    for a in range(3, S):
        for b in range(2, a):
            for c in range(1, b):
                p = top | (1 << a) | (1 << b) | (1 << c) | 1
                if is_irreducible(p):
                    return p
    raise ParameterError(f"no irreducible polynomial found for S={S}")


def gf_mul(a: int, b: int, S: int, poly: int | None = None) -> int:
    if poly is None:
        poly = irreducible_poly(S)
    r = 0
    top = 1 << S
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & top:
            a ^= poly
    return r


# ---------------------------------------------------------------- kernels

@njit(cache=True)
def _mul_tables(keys, S, poly_low):
    """Nibble tables for x -> a_j * x: tab[j, t, v] = a_j * (v << 4t)."""
    r = keys.shape[0]
    nnib = (S + 3) // 4
    tab = np.zeros((max(r, 1), nnib, 16), np.int64)
    mask = (np.int64(1) << S) - 1
    cols = np.zeros(4 * nnib, np.int64)
    for j in range(r):
        c = keys[j]
        for i in range(S):
            cols[i] = c
            top = (c >> (S - 1)) & 1
            c = (c << 1) & mask
            if top == 1:
                c ^= poly_low
        for t in range(nnib):
            base = 4 * t
            for v in range(1, 16):
                q = 0 if v & 1 else (1 if v & 2 else (2 if v & 4 else 3))
                tab[j, t, v] = tab[j, t, v & (v - 1)] ^ cols[base + q]
    return tab


@njit(cache=True, inline="always")
def _block(b, x0, tab, bk, r, nnib):
    x = x0
    for j in range(r - 1, -1, -1):
        if (b >> j) & 1:
            acc = np.int64(0)
            for t in range(nnib):
                acc ^= tab[j, t, (x >> (4 * t)) & 15]
            x = acc ^ bk[j]
    return x


@njit(cache=True, inline="always")
def _block_shared(b, prev, partial, tab, bk, r, nnib):
    """Block b reusing the hash prefix shared with block ``prev``.

    partial[t] holds the value after the t most significant levels of the
    last computed block; it is updated in place.
    """
    diff = b ^ prev
    nb = 0
    while diff > 0:
        diff >>= 1
        nb += 1
    t0 = r - nb if prev >= 0 else 0
    if t0 < 0:
        t0 = 0
    x = partial[t0]
    for t in range(t0, r):
        j = r - 1 - t
        if (b >> j) & 1:
            acc = np.int64(0)
            for q in range(nnib):
                acc ^= tab[j, q, (x >> (4 * q)) & 15]
            x = acc ^ bk[j]
        partial[t + 1] = x
    return x


@njit(cache=True)
def _blocks_kernel(idx, x0, tab, bk):
    r = bk.shape[0]
    nnib = tab.shape[1]
    out = np.empty(idx.shape[0], np.int64)
    for i in range(idx.shape[0]):
        out[i] = _block(idx[i], x0, tab, bk, r, nnib)
    return out


@njit(cache=True)
def _member_kernel(elems, k, kk, thr, S, x0, tab, bk):
    """Codes per element: 1 member, 0 not, 2 tie on the top kk bits.

    Fastest when ``elems`` is sorted (consecutive blocks share hash prefixes).
    """
    r = bk.shape[0]
    nnib = tab.shape[1]
    n = elems.shape[0]
    out = np.empty(n, np.int8)
    scalar = thr.shape[0] == 1
    full = np.int64(1) << kk
    partial = np.empty(r + 1, np.int64)
    partial[0] = x0
    have = np.int64(-1)
    blk = np.int64(0)
    for i in range(n):
        T = thr[0] if scalar else thr[i]
        if T >= full:
            out[i] = 1
            continue
        if T <= 0 and k == kk:
            out[i] = 0
            continue
        pos = elems[i] * k
        rem = kk
        code = -1
        while rem > 0:
            b = pos // S
            off = pos - b * S
            if b != have:
                blk = _block_shared(b, have, partial, tab, bk, r, nnib)
                have = b
            w = S - off
            if w > rem:
                w = rem
            m = (np.int64(1) << w) - 1
            chunk = (blk >> (S - off - w)) & m
            tch = (T >> (rem - w)) & m
            if chunk < tch:
                code = 1
                break
            if chunk > tch:
                code = 0
                break
            rem -= w
            pos += w
        if code == -1:
            code = 0 if k == kk else 2
        out[i] = code
    return out


@njit(cache=True)
def _value_kernel(elems, k, S, x0, tab, bk):
    """The k-bit string of each element (k <= 62), read MSB first."""
    r = bk.shape[0]
    nnib = tab.shape[1]
    out = np.empty(elems.shape[0], np.int64)
    partial = np.empty(r + 1, np.int64)
    partial[0] = x0
    have = np.int64(-1)
    blk = np.int64(0)
    for i in range(elems.shape[0]):
        pos = elems[i] * k
        rem = k
        v = np.int64(0)
        while rem > 0:
            b = pos // S
            off = pos - b * S
            if b != have:
                blk = _block_shared(b, have, partial, tab, bk, r, nnib)
                have = b
            w = S - off
            if w > rem:
                w = rem
            m = (np.int64(1) << w) - 1
            v = (v << w) | ((blk >> (S - off - w)) & m)
            rem -= w
            pos += w
        out[i] = v
    return out


# ---------------------------------------------------------------- generator

def _random_bits(rng: np.random.Generator, S: int) -> int:
    nnibs = (S + 7) // 8
    return int.from_bytes(rng.bytes(nnibs), "little") & ((1 << S) - 1)


@njit(cache=True)
def _splitmix_words(seed, count, S):
    # SplitMix64 stream; enough for seed parts up to MAX_KERNEL_S bits
    out = np.empty(count, dtype=np.int64)
    mask = (np.uint64(1) << np.uint64(S)) - np.uint64(1)
    x = np.uint64(seed)
    for i in range(count):
        x += np.uint64(0x9E3779B97F4A7C15)
        z = x
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        out[i] = np.int64(z & mask)
    return out


class NisanGenerator:
    """Seeded Nisan generator with space parameter S and output length N.

    Either pass an explicit ``x0`` and ``keys`` (list of (a, b) pairs) or a
    64-bit ``seed`` from which they are drawn on first use.
    """

    def __init__(self, S: int, N: int, seed: int | None = None,
                 x0: int | None = None, keys: Sequence[tuple[int, int]] | None = None):
        if S < 1:
            raise ParameterError("S must be >= 1")
        if N < 1:
            raise ParameterError("N must be >= 1")
        self.S = int(S)
        self.N = int(N)
        self.n_blocks = -(-self.N // self.S)
        self.r = ceil_log2(self.n_blocks) if self.n_blocks > 1 else 0
        self.poly = irreducible_poly(self.S)
        self.seed = seed
        if (x0 is None) != (keys is None):
            raise UsageError("give both x0 and keys, or neither")
        if x0 is None and seed is None:
            raise UsageError("need a seed or explicit keys")
        self._x0 = None
        self._keys = None
        if x0 is not None:
            keys = [(int(a), int(b)) for a, b in keys]
            if len(keys) != self.r:
                raise UsageError(f"expected {self.r} hash keys, got {len(keys)}")
            lim = 1 << self.S
            if not 0 <= x0 < lim or any(not (0 <= a < lim and 0 <= b < lim) for a, b in keys):
                raise UsageError("seed parts must be S-bit values")
            self._x0 = int(x0)
            self._keys = keys
        self._tables = None

    @property
    def seed_length(self) -> int:
        return self.S + 2 * self.S * self.r

    def _materialise(self):
        if self._x0 is None:
            if self.S <= MAX_KERNEL_S:
                vals = _splitmix_words(self.seed & ((1 << 64) - 1), 1 + 2 * self.r, self.S).tolist()
            else:
                rng = np.random.Generator(np.random.PCG64(self.seed))
                vals = [_random_bits(rng, self.S) for _ in range(1 + 2 * self.r)]
            self._x0 = vals[0]
            self._keys = [(vals[1 + 2 * j], vals[2 + 2 * j]) for j in range(self.r)]

    @property
    def x0(self) -> int:
        self._materialise()
        return self._x0

    @property
    def keys(self) -> list[tuple[int, int]]:
        self._materialise()
        return list(self._keys)

    def block(self, k: int) -> int:
        if not 0 <= k < self.n_blocks:
            raise UsageError(f"block index {k} out of range [0, {self.n_blocks})")
        self._materialise()
        x = self._x0
        for j in range(self.r - 1, -1, -1):
            if (k >> j) & 1:
                a, b = self._keys[j]
                x = gf_mul(a, x, self.S, self.poly) ^ b
        return x

    def bits(self, offset: int, length: int) -> int:
        """Integer formed by stream bits [offset, offset+length), MSB first."""
        if offset < 0 or length < 0 or offset + length > self.n_blocks * self.S:
            raise UsageError("bit range out of the generator's output")
        v = 0
        pos, rem = offset, length
        while rem > 0:
            b, off = divmod(pos, self.S)
            w = min(self.S - off, rem)
            blk = self.block(b)
            v = (v << w) | ((blk >> (self.S - off - w)) & ((1 << w) - 1))
            pos += w
            rem -= w
        return v

    def output(self) -> list[int]:
        """All N output bits as a list of 0/1 (small generators only)."""
        v = self.bits(0, self.N)
        return [(v >> (self.N - 1 - i)) & 1 for i in range(self.N)]

    # kernel side
    def _kernel_args(self):
        if self.S > MAX_KERNEL_S:
            raise ParameterError(f"vectorised path supports S <= {MAX_KERNEL_S}")
        if self._tables is None:
            self._materialise()
            a = np.array([a for a, _ in self._keys], dtype=np.int64)
            b = np.array([b for _, b in self._keys], dtype=np.int64)
            poly_low = self.poly ^ (1 << self.S)
            self._tables = (np.int64(self._x0), _mul_tables(a, self.S, np.int64(poly_low)), b)
        return self._tables

    def blocks(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_blocks):
            raise UsageError("block index out of range")
        x0, tab, bk = self._kernel_args()
        return _blocks_kernel(idx, x0, tab, bk)


def nisan_block(gen: NisanGenerator, k: int) -> int:
    return gen.block(k)


# ---------------------------------------------------------------- distinguisher

@dataclass(frozen=True)
class Automaton:
    """Deterministic automaton reading one bit per step.

    ``trans[q, bit]`` is the next state; ``accept[q]`` marks accepting states.
    """

    trans: np.ndarray
    accept: np.ndarray
    start: int = 0

    @property
    def n_states(self) -> int:
        return int(self.trans.shape[0])

    @property
    def space_bits(self) -> int:
        return max(1, ceil_log2(self.n_states))

    @classmethod
    def random(cls, S: int, rng: np.random.Generator) -> "Automaton":
        q = 2**S
        trans = rng.integers(0, q, size=(q, 2))
        accept = rng.integers(0, 2, size=q).astype(bool)
        return cls(trans, accept, int(rng.integers(q)))

    def run(self, bits: np.ndarray) -> np.ndarray:
        """Run on a (m, N) 0/1 array; returns acceptance per row."""
        state = np.full(bits.shape[0], self.start, dtype=np.int64)
        for j in range(bits.shape[1]):
            state = self.trans[state, bits[:, j]]
        return self.accept[state]


def _uniform_acceptance(aut: Automaton, N: int) -> Fraction:
    counts = np.zeros(aut.n_states, dtype=object)
    counts[aut.start] = 1
    for _ in range(N):
        nxt = np.zeros(aut.n_states, dtype=object)
        for q in range(aut.n_states):
            if counts[q]:
                nxt[aut.trans[q, 0]] += counts[q]
                nxt[aut.trans[q, 1]] += counts[q]
        counts = nxt
    acc = sum(int(counts[q]) for q in range(aut.n_states) if aut.accept[q])
    return Fraction(acc, 2**N)


def all_generator_outputs(S: int, N: int, max_seeds: int = 2**22) -> np.ndarray:
    """Output bits of the generator under every seed, shape (2^l, N)."""
    n_blocks = -(-N // S)
    r = ceil_log2(n_blocks) if n_blocks > 1 else 0
    ell = S + 2 * S * r
    if 2**ell > max_seeds:
        raise ParameterError(f"enumeration of 2^{ell} seeds exceeds the budget")
    q = 2**S
    poly = irreducible_poly(S)
    mul = np.array([[gf_mul(a, x, S, poly) for x in range(q)] for a in range(q)], dtype=np.int64)
    seeds = np.arange(2**ell, dtype=np.int64)
    parts = [(seeds >> (S * i)) & (q - 1) for i in range(1 + 2 * r)]
    x0 = parts[0]
    keys = [(parts[1 + 2 * j], parts[2 + 2 * j]) for j in range(r)]
    out = np.zeros((seeds.size, n_blocks * S), dtype=np.int64)
    for blk in range(n_blocks):
        x = x0.copy()
        for j in range(r - 1, -1, -1):
            if (blk >> j) & 1:
                a, b = keys[j]
                x = mul[a, x] ^ b
        for i in range(S):
            out[:, blk * S + i] = (x >> (S - 1 - i)) & 1
    return out[:, :N]


def distinguisher_gap(S: int, N: int, automaton: Automaton, max_seeds: int = 2**22) -> Fraction:
    """Exact |P(A(U_N)=1) - P(A(G(U_l))=1)| by full enumeration."""
    if automaton.space_bits > S:
        raise ParameterError("automaton uses more than S bits of state")
    if N > 24:
        raise ParameterError("N too large to enumerate true random strings")
    outs = all_generator_outputs(S, N, max_seeds)
    p_gen = Fraction(int(automaton.run(outs).sum()), outs.shape[0])
    return abs(p_gen - _uniform_acceptance(automaton, N))


# ---------------------------------------------------------------- subsets

@dataclass(frozen=True, eq=False)
class Inclusion:
    """Inclusion probability g(x) = scale * weight(x) (or just scale).

    ``weight`` is a WeightFn; thresholds are exact floors of g(x) * 2^k.
    """

    scale: Fraction
    weight: object = None

    def __post_init__(self):
        s = Fraction(self.scale)
        object.__setattr__(self, "scale", s)
        hi = s * (self.weight.bound if self.weight is not None else 1)
        if s < 0 or hi > 1:
            raise ParameterError("inclusion probability must lie in [0, 1]")

    def threshold(self, k: int, w: int = 1) -> int:
        return (self.scale.numerator * w << k) // self.scale.denominator

    def size(self) -> int:
        return 1 + (self.weight.size() if self.weight is not None else 0)


@functools.lru_cache(maxsize=4096)
def subset_parameters(universe: int, delta: Fraction) -> tuple[int, int]:
    """(k, S) for a pseudorandom subset of a universe of the given size."""
    delta = Fraction(delta)
    if not 0 < delta < 1:
        raise ParameterError("delta must lie in (0, 1)")
    if delta < Fraction(1, universe):
        raise ParameterError(f"delta {delta} below 1/|universe| = 1/{universe}")
    k = max(1, ceil_log2(universe / delta))
    S = max(ceil_log2(universe), ceil_log2(1 / delta)) + 8
    return k, S


@dataclass(frozen=True, eq=False)
class PseudoRandomSubsetSpec:
    """A pseudorandom set over a universe of elements 0..universe-1.

    Element of a point: its mixed-radix index, or key(x) - 1 when ``key`` (a
    WeightFn with bound == universe) is given.  Membership compares the
    element's k-bit block value with the threshold floor(g * 2^k).
    """

    generator: NisanGenerator
    bits_per_element: int
    inclusion: Inclusion
    delta: Fraction
    universe: int
    key: object = None
    seed: int = 0
    side: int | None = None

    @property
    def charge(self) -> int:
        # one node-equivalent per byte of seed describing the block circuit
        return -(-self.generator.seed_length // 8)

    def member_scalar(self, elem: int, w: int = 1) -> bool:
        k = self.bits_per_element
        return self.generator.bits(elem * k, k) < self.inclusion.threshold(k, w)

    def kernel_codes(self, elems: np.ndarray, thr_top: np.ndarray) -> np.ndarray:
        k = self.bits_per_element
        kk = min(k, MAX_KERNEL_S)
        x0, tab, bk = self.generator._kernel_args()
        return _member_kernel(elems, k, kk, thr_top, self.generator.S, x0, tab, bk)


def make_subset_spec(inclusion: Inclusion, delta, seed: int, *, dim: int | None = None,
                     side: int | None = None, key=None) -> PseudoRandomSubsetSpec:
    """Subset over the points of [side]^dim, or over key values when ``key``
    (a WeightFn) is given."""
    if key is None:
        if dim is None or side is None:
            raise UsageError("point-indexed subsets need dim and side")
        universe = side**dim
    else:
        universe = key.bound
        side = None
    delta = Fraction(delta)
    k, S = subset_parameters(universe, delta)
    gen = NisanGenerator(S, k * universe, seed=int(seed))
    return PseudoRandomSubsetSpec(gen, k, inclusion, delta, universe, key, int(seed), side)


def pseudo_subset_predicate(g, delta, seed: int, *, dim: int | None = None, side: int | None = None, key=None):
    """Predicate of a pseudorandom subset that includes x with prob ~g(x).

    ``g`` is a probability (Fraction/int) or an Inclusion.  The universe is
    the domain [side]^dim, or the value range [1, key.bound] of ``key``.
    """
    from .predicate import PseudoRandomMember

    inc = g if isinstance(g, Inclusion) else Inclusion(Fraction(g))
    return PseudoRandomMember(make_subset_spec(inc, delta, seed, dim=dim, side=side, key=key))


@dataclass(frozen=True, eq=False)
class HashSpec:
    """Pseudorandom hash of key values: element key(x)-1 -> 1 + (b-bit block)."""

    generator: NisanGenerator
    bits: int
    universe: int
    key: object
    seed: int = 0

    @property
    def charge(self) -> int:
        return -(-self.generator.seed_length // 8)

    def value_scalar(self, elem: int) -> int:
        return 1 + self.generator.bits(elem * self.bits, self.bits)

    def kernel_values(self, elems: np.ndarray) -> np.ndarray:
        x0, tab, bk = self.generator._kernel_args()
        return 1 + _value_kernel(elems, self.bits, self.generator.S, x0, tab, bk)


def make_hash_spec(key, bits: int, seed: int, delta=None) -> HashSpec:
    universe = key.bound
    if not 1 <= bits <= MAX_KERNEL_S:
        raise ParameterError(f"hash width must be in [1, {MAX_KERNEL_S}]")
    S = ceil_log2(universe) + 8
    if delta is not None:
        S = max(S, ceil_log2(1 / Fraction(delta)) + 8)
    gen = NisanGenerator(S, bits * universe, seed=int(seed))
    return HashSpec(gen, bits, universe, key, int(seed))
