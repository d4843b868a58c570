from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from condsub.domain import Dataset, ParameterError, UsageError
from condsub.oracle import CondOracle
from condsub.prg import (Automaton, Inclusion, NisanGenerator, _uniform_acceptance, all_generator_outputs,
                         distinguisher_gap, gf_mul, irreducible_poly, is_irreducible, make_hash_spec,
                         make_subset_spec, nisan_block, pseudo_subset_predicate, subset_parameters)
from condsub.predicate import Const, Coord, EvalContext, weight_fn


def clmul_mod(a, b, poly, S):
    """Carry-less product then polynomial reduction, written independently."""
    prod = 0
    for i in range(S):
        if (b >> i) & 1:
            prod ^= a << i
    for bit in range(2 * S - 2, S - 1, -1):
        if (prod >> bit) & 1:
            prod ^= poly << (bit - S)
    return prod


def reference_stream(S, x0, keys, poly):
    """Recursive definition: G_j(x) = G_{j-1}(x) || G_{j-1}(h_j(x))."""
    def expand(x, j):
        if j == 0:
            return [x]
        a, b = keys[j - 1]
        return expand(x, j - 1) + expand(clmul_mod(a, x, poly, S) ^ b, j - 1)
    return expand(x0, len(keys))


# ---------------------------------------------------------------- field

@pytest.mark.parametrize("S", [2, 3, 4, 8, 13, 31, 62])
def test_irreducible(S):
    p = irreducible_poly(S)
    assert p >> S == 1 and is_irreducible(p)


@given(st.integers(2, 16), st.data())
def test_gf_field_laws(S, data):
    q = 1 << S
    a, b, c = (data.draw(st.integers(0, q - 1)) for _ in range(3))
    p = irreducible_poly(S)
    assert gf_mul(a, b, S, p) == gf_mul(b, a, S, p) == clmul_mod(a, b, p, S)
    assert gf_mul(a, b ^ c, S, p) == gf_mul(a, b, S, p) ^ gf_mul(a, c, S, p)
    assert gf_mul(a, 1, S, p) == a
    assert gf_mul(gf_mul(a, b, S, p), c, S, p) == gf_mul(a, gf_mul(b, c, S, p), S, p)


def test_gf_no_zero_divisors():
    S, p = 5, irreducible_poly(5)
    for a in range(1, 32):
        assert sorted(gf_mul(a, x, S, p) for x in range(32)) == list(range(32))


# ---------------------------------------------------------------- blocks

def test_degenerate_keys_return_start_block():
    gen = NisanGenerator(4, 32, x0=0b1011, keys=[(0, 0)] * 3)
    assert nisan_block(gen, 0) == 0b1011


def test_block_determinism():
    a = NisanGenerator(16, 1 << 12, seed=99)
    b = NisanGenerator(16, 1 << 12, seed=99)
    assert [nisan_block(a, k) for k in range(0, 256, 7)] == [nisan_block(b, k) for k in range(0, 256, 7)]
    c = NisanGenerator(16, 1 << 12, seed=100)
    assert [c.block(k) for k in range(32)] != [a.block(k) for k in range(32)]


def test_expansion_matches_reference_recursion():
    rng = np.random.default_rng(1)
    for _ in range(100):
        gen = NisanGenerator(4, 32, seed=int(rng.integers(2**63)))
        ref = reference_stream(4, gen.x0, gen.keys, gen.poly)
        assert [gen.block(k) for k in range(8)] == ref
        bits = [(blk >> (3 - i)) & 1 for blk in ref for i in range(4)]
        assert gen.output() == bits


@pytest.mark.parametrize("S", [5, 17, 40, 62])
def test_kernel_blocks_match_scalar(S):
    gen = NisanGenerator(S, S * 5000, seed=S)
    idx = np.array(sorted(np.random.default_rng(S).choice(5000, 300, replace=False)))
    assert gen.blocks(idx).tolist() == [gen.block(int(k)) for k in idx]


def test_bits_span_blocks():
    gen = NisanGenerator(5, 60, seed=3)
    out = gen.output()
    for off, ln in [(0, 5), (3, 9), (12, 17), (55, 5)]:
        want = int("".join(map(str, out[off:off + ln])), 2)
        assert gen.bits(off, ln) == want
    with pytest.raises(UsageError):
        gen.bits(58, 5)
    with pytest.raises(UsageError):
        gen.block(12)


def test_generator_validation():
    with pytest.raises(ParameterError):
        NisanGenerator(0, 10, seed=1)
    with pytest.raises(UsageError):
        NisanGenerator(4, 32)
    with pytest.raises(UsageError):
        NisanGenerator(4, 32, x0=1, keys=[(1, 1)])


# ---------------------------------------------------------------- distinguishers

def _always(S):
    q = 2**S
    return Automaton(np.zeros((q, 2), dtype=np.int64), np.ones(q, dtype=bool), 0)


def test_always_accept_gap_zero():
    assert distinguisher_gap(3, 12, _always(3)) == 0


def test_half_ones_gap():
    N = 12
    trans = np.array([[c, min(c + 1, N)] for c in range(N + 1)])
    aut = Automaton(trans, np.array([c >= N // 2 for c in range(N + 1)]), 0)
    outs = all_generator_outputs(3, N)
    p_gen = Fraction(int(aut.run(outs).sum()), outs.shape[0])
    assert abs(p_gen - _uniform_acceptance(aut, N)) <= Fraction(1, 8)


def test_enumeration_matches_generator_objects():
    S, N = 2, 8
    outs = all_generator_outputs(S, N)
    r = 2
    for seed_val in [0, 5, 77, 2**10 - 1]:
        parts = [(seed_val >> (S * i)) & 3 for i in range(1 + 2 * r)]
        gen = NisanGenerator(S, N, x0=parts[0], keys=[(parts[1], parts[2]), (parts[3], parts[4])])
        assert outs[seed_val].tolist() == gen.output()


def test_space_bound_enforced():
    with pytest.raises(ParameterError):
        distinguisher_gap(2, 8, _always(3))


# ---------------------------------------------------------------- subsets

def _members(pred, ds):
    ctx = EvalContext(ds)
    return np.sort(ctx.order[pred.select(ctx, None)])


def test_subset_constant_probabilities():
    ds = Dataset([[x, y] for x in range(1, 9) for y in range(1, 9)], side=8)
    for seed in range(5):
        assert len(_members(pseudo_subset_predicate(1, Fraction(1, 10), seed, dim=2, side=8), ds)) == 64
        assert len(_members(pseudo_subset_predicate(0, Fraction(1, 10), seed, dim=2, side=8), ds)) == 0


def test_subset_frequency_and_pairwise_correlation():
    pts = np.array([[i % 16 + 1, i // 16 + 1] for i in range(256)])
    ds = Dataset(pts, side=16)
    ctx = EvalContext(ds)
    M = np.zeros((2000, 256), dtype=bool)
    for s in range(2000):
        pr = pseudo_subset_predicate(Fraction(1, 2), Fraction(1, 10), s, dim=2, side=16)
        M[s, ctx.order[pr.select(ctx, None)]] = True
    freq = M.mean(0)
    assert np.all(np.abs(freq - 0.5) <= 0.05)
    C = np.corrcoef(M.T.astype(float))
    # 400 fixed pairs; the max over all 32640 pairs would exceed 0.1 from
    # sampling noise alone (sd ~ 0.022)
    rng = np.random.default_rng(0)
    a, b = rng.integers(256, size=400), rng.integers(256, size=400)
    keep = a != b
    assert np.abs(C[a[keep], b[keep]]).max() <= 0.1
    iu = np.triu_indices(256, 1)
    assert np.abs(C[iu]).mean() <= 0.03


def test_subset_scalar_matches_kernel():
    ds = Dataset(np.random.default_rng(2).integers(1, 1001, size=(500, 2)), dedupe=True)
    for be in ("nisan",):
        o = CondOracle(ds, seed=0, backend=be)
        for seed in range(3):
            pr = pseudo_subset_predicate(Fraction(3, 17), Fraction(1, 100), seed, dim=2, side=ds.side)
            got = set(_members(pr, ds).tolist())
            want = {j for j, p in enumerate(ds.points) if pr.eval(p)}
            assert got == want


def test_weighted_inclusion_scalar_matches_kernel():
    ds = Dataset(np.random.default_rng(3).integers(1, 65, size=(300, 2)), dedupe=True)
    f = weight_fn(Coord(0), ds.side)
    pr = pseudo_subset_predicate(Inclusion(Fraction(1, f.bound), f), Fraction(1, 50), 11, dim=2, side=ds.side)
    assert set(_members(pr, ds).tolist()) == {j for j, p in enumerate(ds.points) if pr.eval(p)}


def test_keyed_subset_consistent_within_classes():
    ds = Dataset([[x, y] for x in range(1, 17) for y in range(1, 5)], side=16)
    key = weight_fn(Coord(0), 16)
    pr = pseudo_subset_predicate(Fraction(1, 2), Fraction(1, 8), 5, key=key)
    chosen = _members(pr, ds)
    xs = {ds[int(j)][0] for j in chosen}
    assert len(chosen) == 4 * len(xs)


def test_hash_scalar_matches_kernel():
    key = weight_fn(Coord(0), 1024)
    spec = make_hash_spec(key, 40, 17)
    elems = np.arange(0, 1024, 3, dtype=np.int64)
    assert spec.kernel_values(elems).tolist() == [spec.value_scalar(int(e)) for e in elems]


def test_subset_parameters():
    k, S = subset_parameters(1 << 20, Fraction(1, 100))
    assert 2**k >= (1 << 20) * 100 and S >= 20
    with pytest.raises(ParameterError):
        subset_parameters(16, Fraction(1, 100))
    with pytest.raises(ParameterError):
        Inclusion(Fraction(3, 2))
