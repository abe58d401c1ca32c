import numpy as np
import pytest

from reference import train_baseline
from textteacher import objective as obj
from textteacher.backbone import BackboneConfig
from textteacher.data import Dataset
from textteacher.diagnostics import recompute_alpha
from textteacher.optim import AdamWHyper, AdamWState, lr_at, optimizer_step
from textteacher.text_targets import build_targets, embed_captions
from textteacher.trainer import (RECORD_KEYS, CheckpointError, TrainConfig, evaluate, init_model,
                                 load_checkpoint, read_metrics, save_checkpoint, train)

TINY = BackboneConfig(image_size=16, patch_size=4, depth=1, width=16, heads=2)


def tiny_config(**kw):
    base = dict(backbone=TINY, d_txt=16, epochs=2, batch_size=16, warmup_epochs=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def targets(tiny_shapes):
    return build_targets(embed_captions(tiny_shapes.ids, tiny_shapes.captions, 16))


def test_smoke_records(tiny_shapes, targets, tmp_path):
    cfg = tiny_config(schedule=obj.ScheduleSpec("const", 0.5))
    model, recs = train(cfg, tiny_shapes, targets, eval_dataset=tiny_shapes, log_path=tmp_path / "m.jsonl")
    assert len(recs) == 2
    assert all(set(r) == set(RECORD_KEYS) for r in recs)
    assert all(np.isfinite(r["L_cls"]) and np.isfinite(r["L_txt"]) and r["alpha_adapt"] > 0 for r in recs)
    assert read_metrics(tmp_path / "m.jsonl") == recs


def test_lambda_zero_matches_plain_classifier(tiny_shapes, targets):
    cfg = tiny_config(schedule=obj.ScheduleSpec("const", 0.0))
    model, recs = train(cfg, tiny_shapes, targets)
    ref = train_baseline(cfg, tiny_shapes)
    for k in model.params:
        assert model.params[k].tobytes() == ref.params[k].tobytes(), k
    assert all(r["L_txt"] == 0.0 and r["alpha_adapt"] == 0.0 for r in recs)


def test_text_head_untouched_when_lambda_zero(tiny_shapes):
    cfg = tiny_config(schedule=obj.ScheduleSpec("const", 0.0))
    model, _ = train(cfg, tiny_shapes)
    init = init_model(TINY, 12, 16, cfg.seed)
    for k in obj.TEXT_HEAD:
        assert np.array_equal(model.params[k], init.params[k])


def test_logs_are_deterministic(tiny_shapes, targets):
    cfg = tiny_config(schedule=obj.ScheduleSpec("const", 0.3), noise_rho=0.2)
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time"} for r in recs]
    _, a = train(cfg, tiny_shapes, targets, eval_dataset=tiny_shapes)
    _, b = train(cfg, tiny_shapes, targets, eval_dataset=tiny_shapes)
    assert strip(a) == strip(b)


def test_eval_accuracy_null_without_eval_set(tiny_shapes):
    _, recs = train(tiny_config(epochs=1, schedule=obj.ScheduleSpec("const", 0.0)), tiny_shapes)
    assert recs[0]["eval_accuracy"] is None


def test_missing_target_id_raises(tiny_shapes, targets):
    partial = targets.__class__(targets.stats, targets.ids[:-1], targets.targets[:-1])
    with pytest.raises(KeyError):
        train(tiny_config(schedule=obj.ScheduleSpec("const", 0.5)), tiny_shapes, partial)


def test_text_run_requires_targets(tiny_shapes):
    with pytest.raises(ValueError):
        train(tiny_config(schedule=obj.ScheduleSpec("const", 0.5)), tiny_shapes)


def test_fraction_keeps_step_count(tiny_shapes):
    steps = []
    cfg = tiny_config(schedule=obj.ScheduleSpec("const", 0.0), fraction=0.5)
    train(cfg, tiny_shapes, step_callback=lambda info: steps.append(info["indices"]))
    assert len(steps) == 2 * (96 // 16)
    assert max(int(i.max()) for i in steps) < 48


def test_uniform_classifier_accuracy_is_first_class_share(tiny_shapes):
    model = init_model(TINY, 12, 16, 0)
    model.params[obj.CLS_W][:] = 0
    model.params[obj.CLS_B][:] = 0
    assert evaluate(model, tiny_shapes) == pytest.approx(np.mean(tiny_shapes.labels == 0))


def test_zeroing_text_head_leaves_accuracy(tiny_shapes, targets):
    model, _ = train(tiny_config(schedule=obj.ScheduleSpec("const", 0.5)), tiny_shapes, targets)
    before = evaluate(model, tiny_shapes)
    for k in obj.TEXT_HEAD:
        model.params[k][:] = 0
    assert evaluate(model, tiny_shapes) == before


def test_evaluate_empty_dataset():
    empty = Dataset([], np.zeros((0, 16, 16, 3), np.float32), np.zeros(0, np.int64), [], ["a", "b"])
    assert evaluate(init_model(TINY, 2, 16, 0), empty) == 0.0


def test_logged_alpha_matches_recomputation(tiny_shapes, targets):
    cfg = tiny_config(epochs=1, schedule=obj.ScheduleSpec("const", 0.5), label_smoothing=0.1)
    checks = []

    def grab(info):
        if info["step"] % 2 == 0:
            m = info["model"].copy()
            T = targets.matrix_for(info["ids"]).astype(np.float32)
            a, _, _ = recompute_alpha(m, tiny_shapes.images[info["indices"]], info["labels"], T, 0.1)
            checks.append((info["alpha"], a))

    train(cfg, tiny_shapes, targets, step_callback=grab)
    for logged, again in checks:
        assert abs(logged - again) <= 1e-5 * again


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    model = init_model(TINY, 12, 16, 5)
    save_checkpoint(model, tmp_path / "m.ttck", cfg)
    back, cfg2 = load_checkpoint(tmp_path / "m.ttck")
    assert cfg2 == cfg
    assert back.backbone == TINY
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()


def test_checkpoint_errors(tmp_path):
    model = init_model(TINY, 12, 16, 0)
    save_checkpoint(model, tmp_path / "m.ttck")
    data = (tmp_path / "m.ttck").read_bytes()
    (tmp_path / "bad.ttck").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ttck")
    (tmp_path / "short.ttck").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ttck")
    model.params[obj.CLS_W] = np.zeros((16, 5), np.float32)
    save_checkpoint(model, tmp_path / "shape.ttck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "shape.ttck")


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1e-3, "learning_rate": 1})
    cfg = TrainConfig.from_dict({"epochs": 5, "schedule": {"kind": "linear", "peak": 0.3}})
    assert cfg.schedule.total_epochs == 5


# -- optimizer ------------------------------------------------------------------

def test_adamw_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    optimizer_step(p, {"w": np.array([0.5, -4.0, 1e-3])}, AdamWState(), AdamWHyper(lr=0.1))
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9], atol=1e-6)


def test_adamw_zero_gradient_only_decays():
    p = {"w": np.array([[2.0, -4.0]]), "b": np.array([1.0])}
    g = {"w": np.zeros((1, 2)), "b": np.zeros(1)}
    optimizer_step(p, g, AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.5), no_decay={"b"})
    np.testing.assert_allclose(p["w"], [[1.9, -3.8]])
    assert p["b"][0] == 1.0


def test_adamw_matches_textbook_loop(rng):
    w = rng.normal(size=4)
    p = {"w": w.copy()}
    state = AdamWState()
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        optimizer_step(p, {"w": g}, state, AdamWHyper(lr=0.01, weight_decay=0.1))
        w = w * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adamw_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        optimizer_step({"w": np.ones(2)}, {"w": np.array([np.nan, 0])}, AdamWState(), AdamWHyper())


def test_lr_curve():
    assert lr_at(0, 100, 10, 1.0) == pytest.approx(0.1)
    assert lr_at(9, 100, 10, 1.0) == pytest.approx(1.0)
    assert lr_at(10, 100, 10, 1.0) == pytest.approx(1.0)
    assert lr_at(55, 100, 10, 1.0) == pytest.approx(0.5)
    assert lr_at(100, 100, 10, 1.0) == pytest.approx(0.0)


def test_memorising_small_split(tiny_shapes):
    small = tiny_shapes.take(np.arange(32))
    wider = BackboneConfig(image_size=16, patch_size=4, depth=2, width=32, heads=2)
    cfg = tiny_config(backbone=wider, epochs=200, lr=3e-3, weight_decay=0.0, warmup_epochs=0,
                      label_smoothing=0.0, schedule=obj.ScheduleSpec("const", 0.0))
    model, recs = train(cfg, small)
    assert evaluate(model, small) == 1.0


def test_evaluate_after_reload_is_identical(tmp_path, tiny_shapes):
    model, _ = train(tiny_config(schedule=obj.ScheduleSpec("const", 0.0)), tiny_shapes)
    save_checkpoint(model, tmp_path / "m.ttck")
    back, _ = load_checkpoint(tmp_path / "m.ttck")
    assert evaluate(back, tiny_shapes) == evaluate(model, tiny_shapes)


def test_adamw_scalar_hand_step():
    p = {"w": np.array([0.0])}
    optimizer_step(p, {"w": np.array([1.0])}, AdamWState(), AdamWHyper(lr=0.1))
    # m_hat = 1, v_hat = 1 after bias correction
    assert p["w"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)
