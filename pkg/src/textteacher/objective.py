"""Dual heads, the three losses, adaptive weighting and lambda schedules."""
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ops
from .numerics.autodiff import TensorNode
from .rng import Rng, derive_seed

SCHEDULES = ("const", "linear", "cos", "halfcos", "jump")
ALPHA_EPS = 1e-8

CLS_W, CLS_B = "head.cls.weight", "head.cls.bias"
TXT_W, TXT_B = "head.txt.weight", "head.txt.bias"
TEXT_HEAD = (TXT_W, TXT_B)


def init_heads(width, n_classes, d_txt, seed, dtype=np.float32):
    """Class head ``d×C`` and text head ``d×d_txt``; independent seeded streams."""
    rc = Rng(derive_seed(seed, 0xC1))
    rt = Rng(derive_seed(seed, 0x7E))
    return {
        CLS_W: rc.trunc_normal((width, n_classes), std=0.02).astype(dtype),
        CLS_B: np.zeros(n_classes, dtype=dtype),
        TXT_W: rt.trunc_normal((width, d_txt), std=0.02).astype(dtype),
        TXT_B: np.zeros(d_txt, dtype=dtype),
    }


def _node(params, name):
    v = params[name]
    return v if isinstance(v, TensorNode) else TensorNode(v)


def class_logits(z, params):
    return ops.linear(z, _node(params, CLS_W), _node(params, CLS_B))


def text_prediction(z, params, l2_normalize=False):
    p = ops.linear(z, _node(params, TXT_W), _node(params, TXT_B))
    return ops.l2_normalize(p) if l2_normalize else p


def forward_heads(z, params, l2_normalize=False):
    """Return ``(p_cls, p_txt)``: class probabilities and text prediction."""
    return ops.softmax(class_logits(z, params)), text_prediction(z, params, l2_normalize)


def classification_loss(logits, labels, smoothing=0.0):
    """Cross-entropy on ``softmax(logits)``.

    Takes logits rather than probabilities; passing ``log(p_cls)`` gives the
    loss of the probabilities themselves.
    """
    return ops.cross_entropy(logits, labels, smoothing)


def text_alignment_loss(pred, targets):
    return ops.clip_loss(pred, targets)


def adaptive_weight(grad_cls_z, grad_txt_z, eps=ALPHA_EPS):
    """Ratio of batch-wide Frobenius norms of the two loss gradients at ``z``.

    The result is a plain float and must be treated as a constant.
    """
    num = float(np.sqrt(np.sum(np.square(grad_cls_z, dtype=np.float64))))
    den = float(np.sqrt(np.sum(np.square(grad_txt_z, dtype=np.float64))))
    return num / (den + eps)


def total_loss(l_txt, l_cls, lam, alpha):
    """``lam·alpha·l_txt + (1-lam)·l_cls``; ``alpha`` is not differentiated."""
    if lam == 0:
        return l_cls
    return ops.add(ops.scale(l_txt, lam * alpha), ops.scale(l_cls, 1.0 - lam))


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "const"
    peak: float = 0.5
    total_epochs: int = 30
    jump_epoch: int = 0
    ramp: int = 10

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; choose from {SCHEDULES}")
        if not 0.0 <= self.peak <= 1.0:
            raise ValueError("peak lambda must lie in [0, 1]")
        if self.total_epochs <= 0:
            raise ValueError("total_epochs must be positive")
        if self.kind == "jump":
            if self.ramp <= 0 or self.jump_epoch < 0:
                raise ValueError("jump needs ramp > 0 and jump_epoch >= 0")
            if self.jump_epoch + self.ramp > self.total_epochs:
                raise ValueError("jump_epoch + ramp must not exceed total_epochs")

    def to_dict(self):
        return asdict(self)


def lambda_at(spec, epoch):
    """Mixing weight for a (possibly fractional) epoch in ``[0, E)``."""
    E = spec.total_epochs
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    lam = spec.peak
    if spec.kind == "const":
        return lam
    if spec.kind == "linear":
        return lam * (1.0 - epoch / E)
    if spec.kind == "cos":
        return lam * (1.0 + math.cos(math.pi * epoch / E)) / 2.0
    if spec.kind == "halfcos":
        return lam * math.cos(math.pi * epoch / (2.0 * E))
    t = spec.jump_epoch
    if epoch < t:
        return lam
    if epoch < t + spec.ramp:
        return lam * (1.0 - (epoch - t) / spec.ramp)
    return 0.0
