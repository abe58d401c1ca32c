import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textteacher.text_targets import (BadMagicError, DimensionError, RawEmbeddingSet, TruncatedError,
                                      VersionError, WhiteningStats, build_targets, embed_captions,
                                      fit_whitening, load_cache, pseudo_encode, save_cache, whiten,
                                      whiten_set, WhitenedTargetSet)


def test_empty_caption_is_zero():
    assert not pseudo_encode("", 16).any()
    assert not pseudo_encode("  ,;  ", 16).any()


def test_additive_and_order_invariant():
    np.testing.assert_array_equal(pseudo_encode("red red", 32), 2 * pseudo_encode("red", 32))
    np.testing.assert_array_equal(pseudo_encode("red triangle", 32), pseudo_encode("triangle red", 32))
    np.testing.assert_array_equal(pseudo_encode("Red, TRIANGLE!", 32), pseudo_encode("red triangle", 32))


def test_pseudo_encode_hash_definition():
    # FNV-1a 64 of b"a" with zero seed is 0xAF63DC4C8601EC8C: bit 63 set -> sign -1
    h = 0xAF63DC4C8601EC8C
    v = pseudo_encode("a", 64, seed=0)
    expected = np.zeros(64)
    expected[h % 64] = -1.0
    np.testing.assert_array_equal(v, expected)


def test_pseudo_encode_seed_and_dim_checks():
    assert not np.array_equal(pseudo_encode("red disk", 64, 0), pseudo_encode("red disk", 64, 1))
    with pytest.raises(ValueError):
        pseudo_encode("red", 4)


def test_fit_whitening_hand_example():
    raw = RawEmbeddingSet(2, ["a", "b"], np.array([[0.0, 0.0], [2.0, 0.0]]))
    stats = fit_whitening(raw, 1e-6)
    np.testing.assert_array_equal(stats.mean, [1.0, 0.0])
    np.testing.assert_allclose(stats.inv_sqrt_cov, np.diag([1.0, 1e3]), rtol=1e-12)


def test_fit_whitening_needs_two_samples():
    with pytest.raises(ValueError):
        fit_whitening(RawEmbeddingSet(2, ["a"], np.ones((1, 2))))


def test_already_white_corpus(rng):
    x = rng.normal(size=(400, 3))
    x -= x.mean(axis=0)
    cov = x.T @ x / 400
    x = x @ np.linalg.inv(np.linalg.cholesky(cov)).T
    stats = fit_whitening(RawEmbeddingSet(3, [str(i) for i in range(400)], x))
    assert np.abs(stats.mean).max() < 1e-12
    np.testing.assert_allclose(stats.inv_sqrt_cov, np.eye(3), atol=1e-9)


def test_whiten_then_refit_is_identity(rng):
    x = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
    ids = [str(i) for i in range(50)]
    white = whiten_set(RawEmbeddingSet(8, ids, x), fit_whitening(RawEmbeddingSet(8, ids, x), 1e-9))
    t = white.targets
    assert np.linalg.norm(t.mean(axis=0)) < 1e-8
    cov = (t - t.mean(axis=0)).T @ (t - t.mean(axis=0)) / 50
    assert np.linalg.norm(cov - np.eye(8)) < 1e-8


def test_whiten_examples():
    stats = WhiteningStats(np.array([1.0, 1.0]), np.diag([0.5, 2.0]))
    np.testing.assert_array_equal(whiten([1.0, 1.0], stats), [0.0, 0.0])
    np.testing.assert_array_equal(whiten([3.0, 1.0], stats), [1.0, 0.0])
    ident = WhiteningStats(np.zeros(3), np.eye(3))
    np.testing.assert_array_equal(whiten([1.0, -2.0, 3.0], ident), [1.0, -2.0, 3.0])
    with pytest.raises(ValueError):
        whiten([1.0], stats)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_whiten_is_affine(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(20, 5))
    stats = fit_whitening(RawEmbeddingSet(5, [str(i) for i in range(20)], x))
    a, b = r.normal(size=5), r.normal(size=5)
    lhs = whiten(a, stats) - whiten(b, stats)
    assert np.abs(lhs - stats.inv_sqrt_cov @ (a - b)).max() < 1e-10


def test_build_targets_fits_on_train_ids_only(rng):
    x = rng.normal(size=(30, 4))
    ids = [f"id{i}" for i in range(30)]
    tg = build_targets(RawEmbeddingSet(4, ids, x), train_ids=ids[:20])
    np.testing.assert_allclose(tg.stats.mean, x[:20].mean(axis=0))
    assert len(tg) == 30


def test_caption_corpus_targets(tiny_shapes):
    raw = embed_captions(tiny_shapes.ids, tiny_shapes.captions, 32)
    tg = build_targets(raw)
    assert np.isfinite(tg.targets).all()
    assert np.linalg.norm(tg.targets.mean(axis=0)) < 1e-8


# -- cache ------------------------------------------------------------------------

def _random_raw(rng, n=7, d=8):
    return RawEmbeddingSet(d, [f"sample-{i}-é" for i in range(n)], rng.normal(size=(n, d)).astype(np.float32))


def test_raw_round_trip_bitwise(tmp_path, rng):
    raw = _random_raw(rng)
    save_cache(raw, tmp_path / "r.ttec")
    back = load_cache(tmp_path / "r.ttec")
    assert isinstance(back, RawEmbeddingSet)
    assert back.ids == raw.ids
    assert back.vectors.tobytes() == raw.vectors.tobytes()


def test_whitened_round_trip(tmp_path, rng):
    x = rng.normal(size=(12, 8)).astype(np.float32).astype(np.float64)
    raw = RawEmbeddingSet(8, [str(i) for i in range(12)], x)
    tg = build_targets(raw)
    tg = WhitenedTargetSet(tg.stats, tg.ids, tg.targets.astype(np.float32))
    save_cache(tg, tmp_path / "w.ttec")
    back = load_cache(tmp_path / "w.ttec", expected_dim=8)
    assert isinstance(back, WhitenedTargetSet)
    assert back.targets.tobytes() == tg.targets.tobytes()
    assert np.array_equal(back.stats.mean, tg.stats.mean)
    assert np.array_equal(back.stats.inv_sqrt_cov, tg.stats.inv_sqrt_cov)


def test_empty_cache_is_valid(tmp_path):
    save_cache(RawEmbeddingSet(16, [], np.zeros((0, 16))), tmp_path / "e.ttec")
    back = load_cache(tmp_path / "e.ttec")
    assert len(back) == 0 and back.dim == 16


def test_cache_errors(tmp_path, rng):
    path = tmp_path / "r.ttec"
    save_cache(_random_raw(rng), path)
    data = path.read_bytes()
    (tmp_path / "t.ttec").write_bytes(data[:-3])
    with pytest.raises(TruncatedError):
        load_cache(tmp_path / "t.ttec")
    (tmp_path / "m.ttec").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        load_cache(tmp_path / "m.ttec")
    (tmp_path / "v.ttec").write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(VersionError):
        load_cache(tmp_path / "v.ttec")
    with pytest.raises(DimensionError):
        load_cache(path, expected_dim=9)
    (tmp_path / "x.ttec").write_bytes(data + b"\0\0")
    with pytest.raises(DimensionError):
        load_cache(tmp_path / "x.ttec")


def test_header_layout(tmp_path, rng):
    path = tmp_path / "r.ttec"
    save_cache(_random_raw(rng, n=3, d=8), path)
    data = path.read_bytes()
    assert data[:4] == b"TTEC"
    assert int.from_bytes(data[4:8], "little") == 1
    assert data[8] == 0
    assert int.from_bytes(data[9:13], "little") == 8
    assert int.from_bytes(data[13:21], "little") == 3
