"""Training loop: backbone + dual heads + scheduled, gradient-balanced objective."""
import dataclasses
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import objective as obj
from .backbone import BackboneConfig, encode, init_backbone
from .data import inject_label_noise, stratified_indices
from .numerics import backward, no_grad
from .numerics.autodiff import TensorNode
from .optim import AdamWHyper, AdamWState, lr_at, optimizer_step
from .rng import Rng, derive_seed

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"TTCK"
CKPT_VERSION = 1
RECORD_KEYS = ("epoch", "L_cls", "L_txt", "alpha_adapt", "lambda_t",
               "train_accuracy", "eval_accuracy", "wall_time")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, step, what="loss"):
        self.epoch, self.step = epoch, step
        super().__init__(f"non-finite {what} at epoch {epoch}, step {step}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d_txt: int = 64
    schedule: obj.ScheduleSpec = field(default_factory=obj.ScheduleSpec)
    adaptive: bool = True
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 3
    label_smoothing: float = 0.1
    seed: int = 0
    noise_rho: float = 0.0
    fraction: float = 1.0
    l2_normalize_alignment: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.schedule, dict):
            self.schedule = obj.ScheduleSpec(**{**self.schedule, "total_epochs": self.epochs})
        if self.schedule.total_epochs != self.epochs:
            self.schedule = dataclasses.replace(self.schedule, total_epochs=self.epochs)
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr and epochs must be positive, weight_decay non-negative, batch_size >= 1")
        if self.schedule.peak > 0 and self.batch_size < 2:
            raise ValueError("the alignment loss needs batch_size >= 2 when lambda > 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def uses_text(self):
        return self.schedule.peak > 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DualHeadModel:
    backbone: BackboneConfig
    n_classes: int
    d_txt: int
    params: dict

    def copy(self):
        return DualHeadModel(self.backbone, self.n_classes, self.d_txt,
                             {k: v.copy() for k, v in self.params.items()})

    def meta(self):
        return {"backbone": self.backbone.to_dict(), "n_classes": self.n_classes, "d_txt": self.d_txt}


def init_model(cfg, n_classes, d_txt, seed, dtype=np.float32):
    params = init_backbone(cfg, seed, dtype)
    params.update(obj.init_heads(cfg.width, n_classes, d_txt, seed, dtype))
    return DualHeadModel(cfg, n_classes, d_txt, params)


def _no_decay(params):
    return {k for k, v in params.items() if v.ndim < 2 or k == "pos_embed"}


def predict_logits(model, images, batch_size=256):
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            z = encode(images[s:s + batch_size], model.params, model.backbone)
            out.append(obj.class_logits(z, model.params).value)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def embed(model, images, batch_size=256):
    """Backbone embeddings ``z`` for a stack of images (no graph)."""
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(encode(images[s:s + batch_size], model.params, model.backbone).value)
    return np.concatenate(out) if out else np.zeros((0, model.backbone.width))


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy from the class head; ties go to the lowest class index."""
    if len(dataset) == 0:
        return 0.0
    pred = np.argmax(predict_logits(model, dataset.images, batch_size), axis=1)
    return float(np.mean(pred == dataset.labels))


@dataclass
class StepResult:
    l_cls: float
    l_txt: float
    alpha: float
    correct: int
    grads: dict
    grad_cls_z: np.ndarray
    grad_txt_z: np.ndarray = None


def compute_step(model, images, labels, targets, lam, cfg):
    """Forward/backward for one batch; returns the combined parameter gradients.

    The heads are evaluated on two detached copies of ``z`` so each loss's
    gradient at ``z`` is available separately (the adaptive weight needs
    both); the weighted sum is then pushed once through the backbone.
    """
    leaves = {k: TensorNode(v, requires_grad=True, name=k) for k, v in model.params.items()
              if lam > 0 or k not in obj.TEXT_HEAD}
    z = encode(images, leaves, model.backbone)

    zc = TensorNode(z.value, requires_grad=True)
    logits = obj.class_logits(zc, leaves)
    l_cls = obj.classification_loss(logits, labels, cfg.label_smoothing)
    if not np.isfinite(l_cls.value):
        raise FloatingPointError("classification loss")
    backward(l_cls)
    g_cls = zc.grad
    correct = int(np.sum(np.argmax(logits.value, axis=1) == labels))

    if lam > 0:
        zt = TensorNode(z.value, requires_grad=True)
        pred = obj.text_prediction(zt, leaves, cfg.l2_normalize_alignment)
        l_txt = obj.text_alignment_loss(pred, targets)
        if not np.isfinite(l_txt.value):
            raise FloatingPointError("alignment loss")
        backward(l_txt)
        g_txt = zt.grad
        alpha = obj.adaptive_weight(g_cls, g_txt) if cfg.adaptive else 1.0
        w_txt = z.dtype.type(lam * alpha)
        w_cls = z.dtype.type(1.0 - lam)
        g_z = w_cls * g_cls + w_txt * g_txt
        head_scale = {obj.CLS_W: w_cls, obj.CLS_B: w_cls, obj.TXT_W: w_txt, obj.TXT_B: w_txt}
        l_txt_val = float(l_txt.value)
    else:
        g_txt, alpha, l_txt_val = None, 0.0, 0.0
        g_z = g_cls
        head_scale = {}
    backward(z, g_z)

    grads = {}
    for k, leaf in leaves.items():
        g = leaf.grad
        if k in head_scale:
            g = head_scale[k] * g
        grads[k] = g
    return StepResult(float(l_cls.value), l_txt_val, alpha, correct, grads, g_cls, g_txt)


def _batches(n, batch_size, seed):
    """Endless stream of seeded-shuffle batches, dropping each pass's remainder."""
    p = 0
    while True:
        perm = Rng(derive_seed(seed, 0x5F, p)).permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield perm[s:s + batch_size]
        p += 1


def train(config, dataset, targets=None, eval_dataset=None, log_path=None,
          epoch_callback=None, step_callback=None):
    """Train a dual-head model; returns ``(model, records)``.

    One record (dict with ``RECORD_KEYS``) per epoch is returned and, with
    ``log_path``, appended to a JSON-lines file. ``fraction < 1`` trains on a
    class-stratified subset for the same number of optimisation steps as the
    full set. ``L_txt`` and ``alpha_adapt`` are logged as 0 in epochs where the
    text branch is inactive.

    Callbacks: ``epoch_callback(epoch, model)`` after each epoch;
    ``step_callback(info)`` after gradients are computed but before the update.
    """
    cfg = config
    dtype = np.dtype(cfg.dtype)
    C = dataset.n_classes
    steps_per_epoch = len(dataset) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError("dataset smaller than one batch")
    total_steps = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch

    train_set = dataset
    if cfg.fraction < 1.0:
        train_set = dataset.take(stratified_indices(dataset.labels, cfg.fraction, cfg.seed))
    if len(train_set) < cfg.batch_size:
        raise ValueError("training subset smaller than one batch")
    labels = train_set.labels
    if cfg.noise_rho > 0:
        labels = inject_label_noise(labels, cfg.noise_rho, C, cfg.seed)
    images = train_set.images.astype(dtype, copy=False)

    T = None
    if cfg.uses_text:
        if targets is None:
            raise ValueError("text targets required when lambda > 0")
        T = np.asarray(targets.matrix_for(train_set.ids), dtype=dtype)
        if T.shape[1] != cfg.d_txt:
            raise ValueError(f"targets have dim {T.shape[1]}, config d_txt={cfg.d_txt}")

    model = init_model(cfg.backbone, C, cfg.d_txt, cfg.seed, dtype)
    state = AdamWState()
    no_decay = _no_decay(model.params)
    batches = _batches(len(train_set), cfg.batch_size, cfg.seed)
    records = []
    log = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lam = obj.lambda_at(cfg.schedule, epoch)
            sums = np.zeros(4)
            seen = 0
            for _ in range(steps_per_epoch):
                idx = next(batches)
                y = labels[idx]
                try:
                    res = compute_step(model, images[idx], y, T[idx] if lam > 0 else None, lam, cfg)
                except FloatingPointError as exc:
                    raise TrainingDivergedError(epoch, step, str(exc)) from exc
                if step_callback is not None:
                    step_callback({"epoch": epoch, "step": step, "indices": idx, "lambda_t": lam,
                                   "alpha": res.alpha, "grad_cls_z": res.grad_cls_z,
                                   "grad_txt_z": res.grad_txt_z, "model": model,
                                   "labels": y, "ids": [train_set.ids[i] for i in idx]})
                hyper = AdamWHyper(lr=lr_at(step, total_steps, warmup, cfg.lr), weight_decay=cfg.weight_decay)
                try:
                    optimizer_step(model.params, res.grads, state, hyper, no_decay)
                except FloatingPointError as exc:
                    raise TrainingDivergedError(epoch, step, "gradient") from exc
                sums += (res.l_cls, res.l_txt, res.alpha, res.correct)
                seen += len(idx)
                step += 1
            rec = {
                "epoch": epoch,
                "L_cls": sums[0] / steps_per_epoch,
                "L_txt": sums[1] / steps_per_epoch,
                "alpha_adapt": sums[2] / steps_per_epoch,
                "lambda_t": lam,
                "train_accuracy": sums[3] / seen,
                "eval_accuracy": evaluate(model, eval_dataset) if eval_dataset is not None else None,
                "wall_time": time.perf_counter() - t0,
            }
            rec = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in rec.items()}
            records.append(rec)
            logger.info("epoch %d  L_cls %.4f  L_txt %.4f  alpha %.3f  lambda %.3f  train %.3f  eval %s",
                        epoch, rec["L_cls"], rec["L_txt"], rec["alpha_adapt"], lam,
                        rec["train_accuracy"], rec["eval_accuracy"])
            if log:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if epoch_callback is not None:
                epoch_callback(epoch, model)
    finally:
        if log:
            log.close()
    return model, records


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model, path, config=None):
    """TTCK: magic, u32 version, u32+JSON config echo, u32 tensor count, tensors.

    Each tensor: u16 name length, UTF-8 name, u8 ndim, ndim × u32 extents,
    little-endian f32 data.
    """
    meta = model.meta()
    if config is not None:
        meta["train_config"] = config.to_dict()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a TTCK checkpoint")
    version, blen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(blen).decode("utf-8"))
    cfg = BackboneConfig(**meta["backbone"])
    expected = init_model(cfg, meta["n_classes"], meta["d_txt"], 0)
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        nlen, ndim = struct.unpack("<HB", take(3))
        name = take(nlen).decode("utf-8")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name not in expected.params or expected.params[name].shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name!r} shape {arr.shape} does not match config")
        params[name] = arr
    if set(params) != set(expected.params):
        raise CheckpointError(f"{path}: missing tensors {sorted(set(expected.params) - set(params))}")
    model = DualHeadModel(cfg, meta["n_classes"], meta["d_txt"], params)
    tc = meta.get("train_config")
    return model, (TrainConfig.from_dict(tc) if tc else None)
