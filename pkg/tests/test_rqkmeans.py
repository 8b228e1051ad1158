"""Residual k-means: loop-based Lloyd oracle (bit-exact), tie-breaks,
residual monotonicity, round-trips."""

import numpy as np
import pytest

from sidrec import rqkmeans as rq
from sidrec.errors import DataError, InputError


# ---------------------------------------------------------------- oracle

def oracle_kmeanspp(points, k, rng):
    """Plain-loop k-means++ mirror of the documented seeding contract."""
    n, d = points.shape
    centers = np.empty((k, d))
    centers[0] = points[int(rng.integers(n))]
    d2 = np.array([((p - centers[0]) ** 2).sum() for p in points])
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = points[idx]
        for i, p in enumerate(points):
            dist = ((p - centers[j]) ** 2).sum()
            if dist < d2[i]:
                d2[i] = dist
    return centers


def oracle_lloyd(points, k, iters, rng):
    n = points.shape[0]
    centers = oracle_kmeanspp(points, k, rng)
    for _ in range(iters):
        assign = np.empty(n, dtype=int)
        own = np.empty(n)
        for i, p in enumerate(points):
            dists = ((p - centers) ** 2).sum(axis=1)
            assign[i] = int(dists.argmin())
            own[i] = dists[assign[i]]
        new = centers.copy()
        empty = []
        for c in range(k):
            members = [i for i in range(n) if assign[i] == c]
            if members:
                new[c] = points[members].mean(axis=0)
            else:
                empty.append(c)
        order = np.argsort(-own, kind="stable")
        for c, p in zip(empty, order):
            new[c] = points[p]
        centers = new
    return centers


def oracle_fit(points, spec, iters, seed):
    streams = np.random.SeedSequence(seed).spawn(spec.levels)
    residual = points.copy()
    out = []
    for level in range(spec.levels):
        rng = np.random.default_rng(streams[level])
        centers = oracle_lloyd(residual, spec.codes_per_level, iters, rng)
        out.append(centers)
        assign = np.array([((r - centers) ** 2).sum(axis=1).argmin() for r in residual])
        residual = residual - centers[assign]
    return out


def sse_per_level(points, centroids):
    residual = points.copy()
    out = []
    for centers in centroids:
        assign = np.array([((r - centers) ** 2).sum(axis=1).argmin() for r in residual])
        own = np.array([((r - centers[a]) ** 2).sum() for r, a in zip(residual, assign)])
        out.append(own.sum())
        residual = residual - centers[assign]
    return out


# ----------------------------------------------------------------- tests

def test_fit_matches_loop_oracle_bit_exact():
    rng = np.random.default_rng(42)
    points = rng.standard_normal((50, 3))
    spec = rq.CodebookSpec(levels=2, codes_per_level=4, dim=3)
    book = rq.fit(points, spec, iters=10, seed=5)
    expect = oracle_fit(points, spec, iters=10, seed=5)
    for got, want in zip(book.centroids, expect):
        assert np.array_equal(got, want)
    got_sse = sse_per_level(points, book.centroids)
    want_sse = sse_per_level(points, expect)
    assert got_sse == want_sse  # bit-equal floats


def test_fit_reproducible():
    rng = np.random.default_rng(0)
    points = rng.standard_normal((30, 4))
    spec = rq.CodebookSpec(levels=3, codes_per_level=5, dim=4)
    a = rq.fit(points, spec, iters=8, seed=9)
    b = rq.fit(points, spec, iters=8, seed=9)
    for x, y in zip(a.centroids, b.centroids):
        assert np.array_equal(x, y)


def test_single_point_world():
    point = np.array([[2.0, -1.0, 0.5]])
    spec = rq.CodebookSpec(levels=3, codes_per_level=4, dim=3)
    book = rq.fit(point, spec, iters=3, seed=1)
    # level-1 centroids all equal the point; residuals exactly zero after
    assert np.array_equal(book.centroids[0][rq.tokenize(book, point[0])[0]], point[0])
    assert rq.residual_mse_per_level(book, point) == [0.0, 0.0, 0.0]
    sid = rq.tokenize(book, point[0])
    np.testing.assert_array_equal(rq.reconstruct(book, sid), point[0])


def test_capacity_exceeds_data_gives_zero_error():
    rng = np.random.default_rng(3)
    points = rng.standard_normal((4, 2))
    spec = rq.CodebookSpec(levels=1, codes_per_level=6, dim=2)
    book = rq.fit(points, spec, iters=5, seed=2)
    assert rq.residual_mse_per_level(book, points)[0] == 0.0


def test_tokenize_tie_breaks_to_smaller_id():
    spec = rq.CodebookSpec(levels=1, codes_per_level=3, dim=1)
    centers = np.array([[1.0], [-1.0], [5.0]])
    book = rq.Codebook(spec=spec, centroids=[centers])
    # 0.0 is equidistant from centroids 0 and 1
    assert rq.tokenize(book, np.array([0.0])) == (0,)


def test_tokenize_exact_chain_and_zero_residual():
    rng = np.random.default_rng(7)
    spec = rq.CodebookSpec(levels=3, codes_per_level=4, dim=5)
    centroids = [rng.standard_normal((4, 5)) * (8.0 ** -l) for l in range(3)]
    book = rq.Codebook(spec=spec, centroids=centroids)
    tokens = (2, 0, 3)
    x = rq.reconstruct(book, tokens)
    assert rq.tokenize(book, x) == tokens
    np.testing.assert_array_equal(rq.reconstruct(book, rq.tokenize(book, x)), x)


def test_tokenize_matches_bruteforce_per_level():
    rng = np.random.default_rng(12)
    points = rng.standard_normal((40, 6))
    spec = rq.CodebookSpec(levels=3, codes_per_level=7, dim=6)
    book = rq.fit(points, spec, iters=6, seed=4)
    for x in rng.standard_normal((25, 6)):
        residual = x.copy()
        expect = []
        for centers in book.centroids:
            best, best_d = 0, np.inf
            for t, c in enumerate(centers):
                dist = ((residual - c) ** 2).sum()
                if dist < best_d:
                    best, best_d = t, dist
            expect.append(best)
            residual = residual - centers[best]
        assert rq.tokenize(book, x) == tuple(expect)
    batch = rq.tokenize_batch(book, points)
    for i in range(points.shape[0]):
        assert tuple(batch[i]) == rq.tokenize(book, points[i])


def test_residual_mse_non_increasing():
    rng = np.random.default_rng(21)
    points = rng.standard_normal((60, 8))
    spec = rq.CodebookSpec(levels=4, codes_per_level=5, dim=8)
    book = rq.fit(points, spec, iters=10, seed=11)
    mses = rq.residual_mse_per_level(book, points)
    for a, b in zip(mses, mses[1:]):
        assert b <= a


def test_retokenized_reconstruction_error_not_worse():
    rng = np.random.default_rng(31)
    points = rng.standard_normal((50, 4))
    spec = rq.CodebookSpec(levels=2, codes_per_level=6, dim=4)
    book = rq.fit(points, spec, iters=8, seed=3)

    def err(x):
        return ((x - rq.reconstruct(book, rq.tokenize(book, x))) ** 2).sum()

    for x in rng.standard_normal((20, 4)):
        recon = rq.reconstruct(book, rq.tokenize(book, x))
        assert err(recon) <= err(x) + 1e-15


def test_reconstruct_edge_cases():
    spec = rq.CodebookSpec(levels=2, codes_per_level=2, dim=3)
    zeros = rq.Codebook(spec=spec, centroids=[np.zeros((2, 3)), np.zeros((2, 3))])
    np.testing.assert_array_equal(rq.reconstruct(zeros, (1, 0)), np.zeros(3))
    single = rq.Codebook(spec=rq.CodebookSpec(1, 2, 3),
                         centroids=[np.array([[1.0, 2, 3], [4, 5, 6.0]])])
    np.testing.assert_array_equal(rq.reconstruct(single, (1,)), [4.0, 5.0, 6.0])
    with pytest.raises(InputError):
        rq.reconstruct(single, (2,))
    with pytest.raises(InputError):
        rq.reconstruct(single, (0, 0))


def test_fit_rejects_bad_inputs():
    spec = rq.CodebookSpec(levels=2, codes_per_level=4, dim=3)
    with pytest.raises(InputError):
        rq.fit(np.zeros((0, 3)), spec, iters=5, seed=0)
    with pytest.raises(InputError):
        rq.fit(np.zeros((5, 2)), spec, iters=5, seed=0)
    with pytest.raises(InputError):
        rq.fit(np.zeros((5, 3)), spec, iters=0, seed=0)
    with pytest.raises(InputError):
        rq.CodebookSpec(levels=0, codes_per_level=4, dim=3).validate()
    with pytest.raises(InputError):
        rq.CodebookSpec(levels=1, codes_per_level=1, dim=3).validate()


def test_sid_stats():
    stats = rq.sid_stats([(0, 1), (0, 1), (2, 3), (4, 5)])
    assert stats == {"items": 4, "distinct": 3, "collisions": 1}


def test_codebook_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(15)
    points = rng.standard_normal((30, 4))
    spec = rq.CodebookSpec(levels=2, codes_per_level=4, dim=4)
    book = rq.fit(points, spec, iters=5, seed=8)
    path = tmp_path / "codebook.txt"
    rq.save_codebook(path, book, config_hash="h1")
    loaded = rq.load_codebook(path)
    assert loaded.spec == book.spec
    for a, b in zip(loaded.centroids, book.centroids):
        assert np.array_equal(a, b)


def test_sid_dump_roundtrip(tmp_path):
    sids = {7: (1, 2, 3), 2: (0, 0, 0), 11: (5, 4, 3)}
    path = tmp_path / "sids.tsv"
    rq.write_sid_dump(path, sids)
    text = path.read_text()
    assert text.splitlines()[0] == "2\t0,0,0"  # sorted by item id
    assert rq.load_sid_dump(path) == sids


def test_sid_dump_rejects_malformed(tmp_path):
    path = tmp_path / "sids.tsv"
    path.write_text("1\t0,0\n2 0,0\n")
    with pytest.raises(DataError) as ei:
        rq.load_sid_dump(path)
    assert ":2:" in str(ei.value)
