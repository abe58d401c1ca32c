"""Self-checks: finite-difference audit of the full objective and an
independent recomputation of the adaptive weight."""
import numpy as np

from . import objective as obj
from .backbone import BackboneConfig, encode
from .numerics import TensorNode, backward, grad_check
from .rng import Rng, derive_seed
from .trainer import TrainConfig, compute_step, init_model


def _perturbed_model(cfg, n_classes, d_txt, seed):
    # init std 0.02 makes gradients tiny; widen so the check is not vacuous
    model = init_model(cfg, n_classes, d_txt, seed, np.float64)
    rng = Rng(derive_seed(seed, 0x6C))
    for k, v in model.params.items():
        v += rng.normal(v.shape, std=0.3)
    return model


def objective_gradcheck(depth=2, width=8, heads=2, image_size=8, patch_size=2, batch=4,
                        n_classes=3, d_txt=8, lam=0.5, adaptive=True, eps=1e-5, seed=0):
    """Compare analytic gradients of the scheduled objective with central differences.

    The adaptive weight is computed once at the base point and held fixed, as
    it is a stop-gradient constant during training.

    Returns a dict with ``max_rel_error`` (finite differences vs full-graph
    backward), ``max_step_gap`` (trainer's split backward vs full-graph) and
    ``alpha``.
    """
    cfg = BackboneConfig(image_size=image_size, patch_size=patch_size, depth=depth,
                         width=width, heads=heads, mlp_ratio=2.0)
    model = _perturbed_model(cfg, n_classes, d_txt, seed)
    rng = Rng(derive_seed(seed, 0xDA))
    images = rng.uniform((batch, image_size, image_size, 3))
    labels = rng.integers(n_classes, (batch,))
    targets = rng.normal((batch, d_txt))
    tcfg = TrainConfig(backbone=cfg, d_txt=d_txt, adaptive=adaptive, label_smoothing=0.1,
                       dtype="float64", batch_size=batch)
    step = compute_step(model, images, labels, targets, lam, tcfg)
    alpha = step.alpha if lam > 0 else 1.0

    leaves = {k: TensorNode(v, requires_grad=True, name=k) for k, v in model.params.items()}

    def model_fn():
        z = encode(images, leaves, cfg)
        l_cls = obj.classification_loss(obj.class_logits(z, leaves), labels, 0.1)
        l_txt = obj.text_alignment_loss(obj.text_prediction(z, leaves), targets)
        return obj.total_loss(l_txt, l_cls, lam, alpha)

    names = list(leaves)
    err = grad_check(model_fn, [leaves[k] for k in names], eps)
    gap = max(
        float(np.max(np.abs(step.grads[k] - leaves[k].grad)) / max(1.0, float(np.max(np.abs(leaves[k].grad)))))
        for k in names if k in step.grads
    )
    n_params = int(sum(v.size for v in model.params.values()))
    return {"max_rel_error": float(err), "max_step_gap": gap, "alpha": float(alpha), "n_params": n_params}


def recompute_alpha(model, images, labels, targets, smoothing=0.1, l2_normalize=False, eps=obj.ALPHA_EPS):
    """Adaptive weight from two separate full-graph backward passes to ``z``.

    Independent of the split scheme used by the trainer.
    """
    params = {k: TensorNode(v) for k, v in model.params.items()}
    out = {}
    for which in ("cls", "txt"):
        z = encode(images, params, model.backbone)
        zl = TensorNode(z.value, requires_grad=True)
        if which == "cls":
            loss = obj.classification_loss(obj.class_logits(zl, params), labels, smoothing)
        else:
            loss = obj.text_alignment_loss(obj.text_prediction(zl, params, l2_normalize), targets)
        backward(loss)
        out[which] = zl.grad
    g_cls = out["cls"].astype(np.float64)
    g_txt = out["txt"].astype(np.float64)
    return np.linalg.norm(g_cls) / (np.linalg.norm(g_txt) + eps), g_cls, g_txt
