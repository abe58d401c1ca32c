import numpy as np
import pytest

from textteacher.backbone import BackboneConfig, NonFiniteError, encode, init_backbone, patchify
from textteacher.numerics import TensorNode, grad_check, ops
from textteacher.numerics.autodiff import ContractError


def test_patchify_small_image():
    cfg = BackboneConfig(image_size=4, patch_size=2, channels=1, width=4, heads=1)
    img = np.arange(16, dtype=float).reshape(4, 4, 1)
    rows = patchify(img, cfg)
    assert rows.shape == (4, 4)
    np.testing.assert_array_equal(rows[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(rows[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(rows[3], [10, 11, 14, 15])


def test_patchify_default_desk_geometry():
    cfg = BackboneConfig(image_size=32, patch_size=4)
    assert patchify(np.zeros((32, 32, 3)), cfg).shape == (64, 48)
    assert cfg.n_patches == 32 * 32 // 4 ** 2


def test_patchify_constant_image_rows_identical():
    cfg = BackboneConfig(image_size=8, patch_size=4, width=8, heads=2)
    rows = patchify(np.full((8, 8, 3), 0.3), cfg)
    assert np.all(rows == rows[0])


def test_patchify_batch_matches_single(rng):
    cfg = BackboneConfig(image_size=8, patch_size=2, width=8, heads=2)
    imgs = rng.uniform(size=(3, 8, 8, 3))
    np.testing.assert_array_equal(patchify(imgs, cfg)[1], patchify(imgs[1], cfg))


def test_patchify_rejects_wrong_size():
    cfg = BackboneConfig(image_size=8, patch_size=2, width=8, heads=2)
    with pytest.raises(ContractError):
        patchify(np.zeros((6, 8, 3)), cfg)


@pytest.mark.parametrize("kw", [dict(image_size=10, patch_size=4), dict(width=10, heads=3), dict(width=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BackboneConfig(**kw)


def test_depth_zero_is_cls_plus_position(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, depth=0, width=8, heads=2, final_norm=False)
    p = init_backbone(cfg, 0, np.float64)
    p["cls_token"] = rng.normal(size=8)
    z = encode(rng.uniform(size=(8, 8, 3)), p, cfg).value
    np.testing.assert_array_equal(z, p["cls_token"] + p["pos_embed"][0])


def test_depth_zero_with_final_norm_is_normalised_cls(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, depth=0, width=8, heads=2)
    p = init_backbone(cfg, 0, np.float64)
    p["cls_token"] = rng.normal(size=8)
    z = encode(rng.uniform(size=(8, 8, 3)), p, cfg).value
    x = p["cls_token"] + p["pos_embed"][0]
    np.testing.assert_allclose(z, (x - x.mean()) / np.sqrt(x.var() + 1e-6), atol=1e-12)


def _random_model(cfg, seed=0):
    p = init_backbone(cfg, seed, np.float64)
    r = np.random.default_rng(seed)
    for v in p.values():
        v += r.normal(size=v.shape) * 0.3
    return p


def test_patch_permutation_invariance(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, depth=2, width=8, heads=2)
    p = _random_model(cfg)
    img = rng.uniform(size=(8, 8, 3))
    z0 = encode(img, p, cfg).value
    # swap patch 0 and 3 in the image and their positional rows (1 and 4)
    swapped = img.copy()
    swapped[0:4, 0:4], swapped[4:8, 4:8] = img[4:8, 4:8].copy(), img[0:4, 0:4].copy()
    q = {k: v.copy() for k, v in p.items()}
    q["pos_embed"][[1, 4]] = p["pos_embed"][[4, 1]]
    z1 = encode(swapped, q, cfg).value
    assert np.abs(z0 - z1).max() < 1e-10


def test_cls_only_last_block_equals_full(rng):
    cfg = BackboneConfig(image_size=8, patch_size=2, depth=3, width=8, heads=2)
    p = _random_model(cfg, 3)
    imgs = rng.uniform(size=(2, 8, 8, 3))
    z_fast = encode(imgs, p, cfg).value
    z_full, layers = encode(imgs, p, cfg, return_layers=True)
    np.testing.assert_allclose(z_fast, z_full.value, atol=1e-12)
    assert len(layers) == cfg.depth + 1


def test_deterministic_and_brightness_sensitive(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, depth=2, width=8, heads=2)
    p = _random_model(cfg, 1)
    img = rng.uniform(size=(8, 8, 3))
    a = encode(img, p, cfg).value
    assert np.array_equal(a, encode(img, p, cfg).value)
    assert np.linalg.norm(a - encode(2 * img, p, cfg).value) > 1e-6


def test_patch_projection_gradient_matches_finite_differences(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, depth=2, width=8, heads=2)
    p = _random_model(cfg, 2)
    leaves = {k: TensorNode(v, requires_grad=True) for k, v in p.items()}
    imgs = rng.uniform(size=(2, 8, 8, 3))
    err = grad_check(lambda: ops.sum(encode(imgs, leaves, cfg)), [leaves["patch_proj.weight"]], 1e-5)
    assert err < 1e-4


def test_nonfinite_activation_reports_layer(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, depth=2, width=8, heads=2)
    p = _random_model(cfg)
    p["blocks.1.mlp.fc2.bias"][0] = np.inf
    with pytest.raises(NonFiniteError) as info:
        encode(rng.uniform(size=(8, 8, 3)), p, cfg)
    assert info.value.layer == 1


def test_init_shapes_and_zeros():
    cfg = BackboneConfig()
    p = init_backbone(cfg, 0)
    assert p["patch_proj.weight"].shape == (48, 64)
    assert p["pos_embed"].shape == (65, 64)
    assert not p["cls_token"].any() and not p["blocks.0.attn.qkv.bias"].any()
    assert np.abs(p["blocks.0.attn.qkv.weight"]).max() <= 0.04 + 1e-7
