"""Representation measurements: linear CKA, per-class Fréchet distance,
text-head inversion, caption-embedding linear probe, embedding export."""
import numpy as np

from . import objective as obj
from .numerics import TensorNode, backward, ops
from .numerics.linalg import psd_sqrt, sym_eig
from .optim import AdamWHyper, AdamWState, optimizer_step
from .rng import Rng, derive_seed
from .text_targets import RawEmbeddingSet, save_cache
from .trainer import embed


def _centered(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"{name} must be an (n >= 2, d) matrix")
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        raise ValueError(f"{name} has zero variance")
    return xc


def linear_cka(x, y):
    """Biased linear CKA: ``|Yc^T Xc|_F^2 / (|Xc^T Xc|_F |Yc^T Yc|_F)``."""
    xc = _centered(x, "X")
    yc = _centered(y, "Y")
    if xc.shape[0] != yc.shape[0]:
        raise ValueError(f"row counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))


def cka_matrix(layers_a, layers_b):
    """CKA between every pair of layer feature matrices."""
    return np.array([[linear_cka(a, b) for b in layers_b] for a in layers_a])


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b):
    """Fréchet distance between two Gaussians.

    The trace term averages both sandwich orders so the result is exactly
    symmetric in its arguments.
    """
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    ra, rb = psd_sqrt(cov_a), psd_sqrt(cov_b)
    tr_ab = np.trace(psd_sqrt(ra @ cov_b @ ra))
    tr_ba = np.trace(psd_sqrt(rb @ cov_a @ rb))
    d = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - (tr_ab + tr_ba))
    return max(d, 0.0)


def _fit_gaussian(x, eps):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(1, x.shape[0] - 1)
    dim = cov.shape[0]
    reg = eps if eps is not None else 1e-6 * np.trace(cov) / dim
    return mu, cov + reg * np.eye(dim)


def ffd(feats_a, labels_a, feats_b, labels_b, eps=None):
    """Unweighted mean over classes of the Fréchet distance between per-class
    Gaussian fits. ``eps`` defaults to ``1e-6·trace(Σ)/d`` per fit.
    """
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    ca, cb = set(labels_a.tolist()), set(labels_b.tolist())
    if ca != cb:
        raise ValueError(f"classes present on one side only: {sorted(ca ^ cb)}")
    dists = []
    for c in sorted(ca):
        mu_a, s_a = _fit_gaussian(np.asarray(feats_a)[labels_a == c], eps)
        mu_b, s_b = _fit_gaussian(np.asarray(feats_b)[labels_b == c], eps)
        dists.append(gaussian_frechet(mu_a, s_a, mu_b, s_b))
    return float(np.mean(dists))


def text_head_left_inverse(params, rel_tol=1e-8):
    """``(A A^T)^{-1} A`` for the ``d×d_txt`` text head weight ``A``.

    With row-vector embeddings ``e = z A + b`` this maps ``e - b`` back to ``z``
    (right-multiplied: ``z = (e - b) @ inv.T``).
    """
    a = np.asarray(params[obj.TXT_W], dtype=np.float64)
    d, d_txt = a.shape
    if d > d_txt:
        raise ValueError(f"embedding dim {d} exceeds text dim {d_txt}; no left inverse")
    eig = sym_eig(a @ a.T)
    w = eig.eigenvalues
    if w[-1] <= 0 or np.sqrt(max(w[0], 0.0) / w[-1]) <= rel_tol:
        raise ValueError("text head is rank deficient")
    v = eig.eigenvectors
    gram_inv = (v / w) @ v.T
    return gram_inv @ a


def invert_text_head(e_txt, params):
    """Class distribution implied by a text embedding via the text head's left inverse."""
    e = np.asarray(e_txt, dtype=np.float64)
    inv = text_head_left_inverse(params)
    z = (e - np.asarray(params[obj.TXT_B], dtype=np.float64)) @ inv.T
    logits = z @ np.asarray(params[obj.CLS_W], dtype=np.float64) + np.asarray(params[obj.CLS_B], dtype=np.float64)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def linear_probe(features, labels, train_idx, test_idx, epochs=100, lr=0.05,
                 weight_decay=0.0, batch_size=128, seed=0):
    """Held-out accuracy of a softmax-regression layer trained on fixed features.

    Features are standardised with train-split statistics first.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("train and test splits overlap")
    classes = np.unique(y[train_idx])
    if classes.size < 2:
        raise ValueError("training split holds a single class")
    C = int(y.max()) + 1
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd

    rng = Rng(derive_seed(seed, 0x9803E))
    params = {"w": np.zeros((x.shape[1], C)), "b": np.zeros(C)}
    state = AdamWState()
    hyper = AdamWHyper(lr=lr, weight_decay=weight_decay)
    n = train_idx.size
    for _ in range(epochs):
        perm = train_idx[rng.permutation(n)]
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            w = TensorNode(params["w"], requires_grad=True)
            b = TensorNode(params["b"], requires_grad=True)
            loss = ops.cross_entropy(ops.linear(x[idx], w, b), y[idx])
            backward(loss)
            optimizer_step(params, {"w": w.grad, "b": b.grad}, state, hyper)
    pred = np.argmax(x[test_idx] @ params["w"] + params["b"], axis=1)
    return float(np.mean(pred == y[test_idx]))


def export_embeddings(model, dataset, path):
    """Write backbone embeddings of every sample as a raw TTEC cache."""
    z = embed(model, dataset.images.astype(model.params["pos_embed"].dtype, copy=False))
    emb = RawEmbeddingSet(model.backbone.width, list(dataset.ids), z)
    save_cache(emb, path)
    return emb


def layer_features(model, images, batch_size=256):
    """[CLS] state after every block (list of (n, d) arrays).

    The pre-block [CLS] state is input-independent, so it is not returned.
    """
    from .backbone import encode
    from .numerics import no_grad

    chunks = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            _, layers = encode(images[s:s + batch_size], model.params, model.backbone, return_layers=True)
            chunks.append(layers)
    return [np.concatenate([c[i] for c in chunks]) for i in range(1, len(chunks[0]))]
