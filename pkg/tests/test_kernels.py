import subprocess
import sys

import numpy as np
import pytest

from textteacher import _fallback, kernels
from textteacher.rng import Rng, derive_seed, seed_state, splitmix64

compiled = pytest.importorskip("textteacher._kernels")

M64 = (1 << 64) - 1


def reference_xoshiro(state, n):
    """Plain-int transcription of the xoshiro256++ reference."""
    s = [int(x) for x in state]
    rotl = lambda x, k: ((x << k) | (x >> (64 - k))) & M64  # noqa: E731
    out = []
    for _ in range(n):
        out.append((rotl((s[0] + s[3]) & M64, 23) + s[0]) & M64)
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def test_splitmix64_known_first_output():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_xoshiro_matches_reference():
    st = seed_state(42)
    expected = reference_xoshiro(st, 50)
    assert Rng(42).raw(50).tolist() == expected


@pytest.mark.parametrize("impl", [compiled, _fallback])
def test_fill_matches_reference_per_lane(impl):
    states = np.stack([seed_state(s) for s in (1, 2, 3)])
    refs = [reference_xoshiro(states[i], 20) for i in range(3)]
    out = impl.xoshiro_fill(states.copy(), 20)
    assert out.tolist() == refs


def test_fill_resumes_state():
    a = np.stack([seed_state(9)])
    first = compiled.xoshiro_fill(a, 7)
    second = compiled.xoshiro_fill(a, 5)
    whole = compiled.xoshiro_fill(np.stack([seed_state(9)]), 12)
    assert np.array_equal(np.concatenate([first, second], axis=1), whole)


@pytest.mark.parametrize("data,expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv1a_published_vectors(data, expected):
    assert compiled.fnv1a64(data, 0) == expected
    assert _fallback.fnv1a64(data, 0) == expected


def test_fnv_seed_changes_hash():
    assert compiled.fnv1a64(b"red", 1) != compiled.fnv1a64(b"red", 0)
    assert compiled.fnv1a64(b"red", 77) == _fallback.fnv1a64(b"red", 77)


@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_jacobi_backends_bitwise_equal(n, rng):
    a = rng.normal(size=(n, n))
    a = a + a.T
    a1, v1 = a.copy(), np.eye(n)
    a2, v2 = a.copy(), np.eye(n)
    s1 = compiled.jacobi_eig(a1, v1, 1e-12, 100)
    s2 = _fallback.jacobi_eig(a2, v2, 1e-12, 100)
    assert s1 == s2
    assert np.array_equal(a1, a2) and np.array_equal(v1, v2)


def test_derive_seed_separates_streams():
    assert derive_seed(0, 1) != derive_seed(0, 2)
    assert derive_seed(5, 1, 2) == derive_seed(5, 1, 2)


def test_pure_python_switch_produces_same_dataset(tmp_path):
    code = (
        "import numpy as np, textteacher.kernels as k;"
        "from textteacher.data import DatasetSpec, generate_shapes;"
        "d = generate_shapes(DatasetSpec(n_samples=24, image_size=16, seed=5));"
        f"np.save(r'{tmp_path}/' + k.BACKEND + '.npy', d.images)"
    )
    for env in ({"TT_PURE_PYTHON": "1"}, {"TT_PURE_PYTHON": "0"}):
        subprocess.run([sys.executable, "-c", code], check=True, env={**__import__("os").environ, **env})
    assert np.array_equal(np.load(tmp_path / "python.npy"), np.load(tmp_path / "cython.npy"))


def test_backend_reports_compiled():
    assert kernels.BACKEND == "cython"
