"""Command-line experiment runner.

Every subcommand is a deterministic composition of library calls; all
randomness comes from ``--seed``. Outputs are CSV/JSON for external plotting.
"""
import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis
from .backbone import BackboneConfig
from .data import (DatasetSpec, generate_shapes, load_dataset, save_dataset,
                   train_eval_split)
from .diagnostics import objective_gradcheck
from .objective import ScheduleSpec
from .text_targets import (WhitenedTargetSet, build_targets, embed_captions,
                           load_cache, pseudo_encode, save_cache, whiten)
from .trainer import (TrainConfig, TrainingDivergedError, embed, load_checkpoint,
                      save_checkpoint, train)

logger = logging.getLogger("textteacher")

EXPERIMENT_KEYS = {"data", "eval_data", "eval_fraction", "targets", "dataset", "output",
                   "experiment", "text_seed"}


class ExperimentError(RuntimeError):
    pass


# -- config handling ------------------------------------------------------------

def load_experiment(path):
    """Split a JSON config into (TrainConfig kwargs, experiment options)."""
    if not path:
        return {}, {}
    if not os.path.exists(path):
        raise ExperimentError(f"config file not found: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    exp = {k: raw.pop(k) for k in list(raw) if k in EXPERIMENT_KEYS}
    return raw, exp


def build_config(args):
    train_kw, exp = load_experiment(getattr(args, "config", None))
    sched = dict(train_kw.pop("schedule", {}) or {})
    if getattr(args, "schedule", None) is not None:
        sched["kind"] = args.schedule
    if getattr(args, "lam", None) is not None:
        sched["peak"] = args.lam
    if getattr(args, "jump_epoch", None) is not None:
        sched["jump_epoch"] = args.jump_epoch
    overrides = {
        "adaptive": getattr(args, "adaptive", None),
        "noise_rho": getattr(args, "noise_rho", None),
        "fraction": getattr(args, "fraction", None),
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
    }
    train_kw.update({k: v for k, v in overrides.items() if v is not None})
    epochs = train_kw.get("epochs", TrainConfig.epochs)
    sched.setdefault("total_epochs", epochs)
    sched["total_epochs"] = epochs
    train_kw["schedule"] = ScheduleSpec(**sched)
    if "backbone" in train_kw:
        train_kw["backbone"] = BackboneConfig(**train_kw["backbone"])
    cfg = TrainConfig.from_dict(train_kw)
    for k in ("data", "eval_data", "targets"):
        if getattr(args, k, None):
            exp[k] = getattr(args, k)
    return cfg, exp


def prepare_data(exp, cfg, need_targets=True):
    """Resolve (train, eval, targets) for an experiment."""
    if exp.get("data"):
        if not os.path.isdir(exp["data"]):
            raise ExperimentError(f"dataset directory not found: {exp['data']}")
        full = load_dataset(exp["data"])
    elif exp.get("dataset"):
        full = generate_shapes(DatasetSpec(**exp["dataset"]))
    else:
        raise ExperimentError("no dataset: pass --data or put 'data'/'dataset' in the config")
    if exp.get("eval_data"):
        train_set, eval_set = full, load_dataset(exp["eval_data"])
    else:
        train_set, eval_set = train_eval_split(full, exp.get("eval_fraction", 0.2), 0)
    targets = None
    if need_targets:
        if exp.get("targets"):
            targets = load_cache(exp["targets"], expected_dim=cfg.d_txt)
            if not isinstance(targets, WhitenedTargetSet):
                raise ExperimentError("--targets must be a whitened TTEC cache")
        else:
            raw = embed_captions(train_set.ids, train_set.captions, cfg.d_txt, exp.get("text_seed", 0))
            targets = build_targets(raw)
    return train_set, eval_set, targets


def _threads():
    try:
        return max(1, int(os.environ.get("TT_THREADS", "1")))
    except ValueError:
        return 1


def _echo(cfg, exp, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump({**cfg.to_dict(), **exp}, fh, indent=2, sort_keys=True)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args):
    spec = DatasetSpec(n_samples=args.n_samples, image_size=args.image_size, n_colors=args.n_colors,
                       n_shapes=args.n_shapes, pixel_noise_std=args.noise_std, seed=args.seed)
    ds = generate_shapes(spec)
    save_dataset(ds, args.out)
    return {"out": args.out, "n_samples": len(ds), "classes": ds.n_classes}


def cmd_embed(args):
    ds = load_dataset(args.data)
    raw = embed_captions(ds.ids, ds.captions, args.d_txt, args.seed)
    os.makedirs(args.out, exist_ok=True)
    raw_path = os.path.join(args.out, "raw.ttec")
    save_cache(raw, raw_path)
    lengths = [len(c.split()) for c in ds.captions]
    result = {"raw": raw_path, "count": len(raw), "d_txt": args.d_txt,
              "caption_words_mean": float(np.mean(lengths)) if lengths else 0.0,
              "caption_words_max": int(max(lengths)) if lengths else 0}
    if args.whiten:
        path = os.path.join(args.out, "targets.ttec")
        save_cache(build_targets(raw, floor=args.floor), path)
        result["whitened"] = path
    return result


def cmd_train(args):
    cfg, exp = build_config(args)
    train_set, eval_set, targets = prepare_data(exp, cfg, need_targets=cfg.uses_text)
    _echo(cfg, exp, args.out)
    model, records = train(cfg, train_set, targets, eval_set,
                           log_path=os.path.join(args.out, "metrics.jsonl"))
    ckpt = os.path.join(args.out, "model.ttck")
    save_checkpoint(model, ckpt, cfg)
    return {"checkpoint": ckpt, "eval_accuracy": records[-1]["eval_accuracy"]}


def _run_one(cfg, train_set, eval_set, targets):
    try:
        model, records = train(cfg, train_set, targets if cfg.uses_text else None, eval_set)
        return records[-1]["eval_accuracy"], records
    except TrainingDivergedError as exc:
        logger.warning("run diverged: %s", exc)
        return float("nan"), None


def cmd_sweep_lambda(args):
    base, exp = build_config(args)
    train_set, eval_set, targets = prepare_data(exp, base)
    _echo(base, exp, args.out)
    adaptive = {"on": [True], "off": [False], "both": [True, False]}[args.adaptive_mode]
    jobs = [(lam, ad, s) for ad in adaptive for lam in args.lambdas for s in args.seeds]

    def run(job):
        lam, ad, s = job
        sched = dataclasses.replace(base.schedule, peak=lam)
        cfg = dataclasses.replace(base, schedule=sched, adaptive=ad, seed=s)
        acc, _ = _run_one(cfg, train_set, eval_set, targets)
        return lam, ad, s, acc

    with ThreadPoolExecutor(_threads()) as pool:
        results = list(pool.map(run, jobs))
    path = os.path.join(args.out, "sweep.csv")
    _write_csv(path, ["lambda", "adaptive", "seed", "accuracy"],
               [[repr(float(l)), int(a), s, _fmt(acc)] for l, a, s, acc in results])
    return {"csv": path, "rows": len(results)}


def cmd_noise_study(args):
    base, exp = build_config(args)
    train_set, eval_set, targets = prepare_data(exp, base)
    _echo(base, exp, args.out)
    jobs = [(rho, m, s) for rho in args.rhos for m in ("baseline", "textteacher") for s in args.seeds]

    def run(job):
        rho, method, s = job
        peak = base.schedule.peak if method == "textteacher" else 0.0
        cfg = dataclasses.replace(base, schedule=dataclasses.replace(base.schedule, peak=peak),
                                  noise_rho=rho, seed=s)
        acc, _ = _run_one(cfg, train_set, eval_set, targets)
        return rho, method, s, acc

    with ThreadPoolExecutor(_threads()) as pool:
        results = list(pool.map(run, jobs))
    path = os.path.join(args.out, "noise.csv")
    _write_csv(path, ["rho", "method", "seed", "accuracy"],
               [[repr(float(r)), m, s, _fmt(a)] for r, m, s, a in results])
    return {"csv": path, "rows": len(results)}


def cmd_jump_study(args):
    base, exp = build_config(args)
    train_set, eval_set, targets = prepare_data(exp, base)
    _echo(base, exp, args.out)
    probe = eval_set
    runs = [("baseline", None)] + [(str(t), t) for t in args.t_stars]
    acc_rows, ffd_rows = [], []
    for label, t_star in runs:
        if t_star is None:
            sched = dataclasses.replace(base.schedule, kind="const", peak=0.0)
        else:
            sched = dataclasses.replace(base.schedule, kind="jump", jump_epoch=t_star)
        cfg = dataclasses.replace(base, schedule=sched)
        feats = []

        def grab(epoch, model, feats=feats):
            feats.append(embed(model, probe.images))

        _, records = train(cfg, train_set, targets if cfg.uses_text else None, eval_set,
                           epoch_callback=grab)
        final = feats[-1]
        acc_rows.append([label, cfg.seed, _fmt(records[-1]["eval_accuracy"])])
        for e, f in enumerate(feats):
            ffd_rows.append([label, e, _fmt(analysis.ffd(f, probe.labels, final, probe.labels))])
    _write_csv(os.path.join(args.out, "jump_accuracy.csv"), ["t_star", "seed", "accuracy"], acc_rows)
    _write_csv(os.path.join(args.out, "jump_ffd.csv"), ["t_star", "epoch", "ffd"], ffd_rows)
    return {"accuracy_csv": os.path.join(args.out, "jump_accuracy.csv"),
            "ffd_csv": os.path.join(args.out, "jump_ffd.csv"), "runs": len(runs)}


def cmd_analyze(args):
    out = {}
    if args.cka:
        if not args.data:
            raise ExperimentError("--cka needs --data for probe images")
        ds = load_dataset(args.data)
        models = [load_checkpoint(p)[0] for p in args.cka]
        feats = [analysis.layer_features(m, ds.images) for m in models]
        pairs = []
        for i in range(len(models)):
            for j in range(i + 1, len(models)):
                pairs.append({"a": args.cka[i], "b": args.cka[j],
                              "cka_z": analysis.linear_cka(feats[i][-1], feats[j][-1]),
                              "layerwise": analysis.cka_matrix(feats[i], feats[j]).tolist()})
        out["cka"] = pairs
    if args.ffd:
        if not args.data:
            raise ExperimentError("--ffd needs --data for probe images")
        ds = load_dataset(args.data)
        za, zb = (embed(load_checkpoint(p)[0], ds.images) for p in args.ffd)
        out["ffd"] = {"a": args.ffd[0], "b": args.ffd[1],
                      "value": analysis.ffd(za, ds.labels, zb, ds.labels),
                      "probe": args.data}
    if args.invert:
        if not args.targets or not args.caption:
            raise ExperimentError("--invert needs --targets (whitened cache) and --caption")
        model, _ = load_checkpoint(args.invert)
        tg = load_cache(args.targets, expected_dim=model.d_txt)
        if not isinstance(tg, WhitenedTargetSet):
            raise ExperimentError("--targets must be a whitened TTEC cache")
        results = []
        for cap in args.caption:
            t = whiten(pseudo_encode(cap, model.d_txt, args.text_seed), tg.stats)
            p = analysis.invert_text_head(t, model.params)
            results.append({"caption": cap, "probabilities": p.tolist(), "argmax": int(np.argmax(p))})
        out["invert"] = results
    if args.probe:
        if not args.data:
            raise ExperimentError("--probe needs --data for labels")
        ds = load_dataset(args.data)
        emb = load_cache(args.probe)
        rows = emb.targets if isinstance(emb, WhitenedTargetSet) else emb.vectors
        index = {k: i for i, k in enumerate(emb.ids)}
        x = rows[[index[k] for k in ds.ids]]
        tr, te = train_eval_split(ds, 0.2, args.seed)
        pos = {k: i for i, k in enumerate(ds.ids)}
        acc = analysis.linear_probe(x, ds.labels, [pos[k] for k in tr.ids], [pos[k] for k in te.ids],
                                    seed=args.seed)
        out["probe"] = {"cache": args.probe, "accuracy": acc, "chance": 1.0 / ds.n_classes}
    if not out:
        raise ExperimentError("nothing to analyze: pass --cka, --ffd, --invert or --probe")
    return out


def cmd_gradcheck(args):
    report = objective_gradcheck(depth=args.depth, width=args.width, heads=args.heads,
                                 image_size=args.image_size, patch_size=args.patch_size,
                                 batch=args.batch, eps=args.eps, seed=args.seed)
    report["tolerance"] = args.tol
    report["passed"] = report["max_rel_error"] < args.tol and report["max_step_gap"] < args.tol
    return report


# -- parser ---------------------------------------------------------------------

def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _train_flags(p, seed_default=None):
    p.add_argument("--config", help="JSON file with TrainConfig keys (flags override)")
    p.add_argument("--data", help="dataset directory (gen-data output)")
    p.add_argument("--eval-data", dest="eval_data", help="held-out dataset directory")
    p.add_argument("--targets", help="whitened TTEC cache; computed on the fly if omitted")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--schedule", choices=["const", "linear", "cos", "halfcos", "jump"])
    p.add_argument("--jump-epoch", dest="jump_epoch", type=int)
    p.add_argument("--adaptive", dest="adaptive", action="store_true", default=None)
    p.add_argument("--no-adaptive", dest="adaptive", action="store_false")
    p.add_argument("--noise-rho", dest="noise_rho", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="textteacher", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic captioned-shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=6000)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--n-colors", type=int, default=4)
    p.add_argument("--n-shapes", type=int, default=3)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("embed", help="pseudo-encode captions into TTEC caches")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-txt", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--floor", type=float, default=1e-6)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train one model")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-lambda", help="constant-lambda sweep with/without adaptive weighting")
    _train_flags(p)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--adaptive-mode", dest="adaptive_mode", choices=["on", "off", "both"], default="both")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("jump-study", help="jump schedules: final accuracy and FFD to the final model")
    _train_flags(p)
    p.add_argument("--t-stars", dest="t_stars", type=_ints, required=True)
    p.set_defaults(func=cmd_jump_study)

    p = sub.add_parser("noise-study", help="baseline vs TextTeacher under label noise")
    _train_flags(p)
    p.add_argument("--rhos", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--seeds", type=_ints, default=[0])
    p.set_defaults(func=cmd_noise_study)

    p = sub.add_parser("analyze", help="CKA / FFD / text-head inversion / linear probe")
    p.add_argument("--cka", nargs="+", metavar="CKPT")
    p.add_argument("--ffd", nargs=2, metavar=("CKPT_A", "CKPT_B"))
    p.add_argument("--invert", metavar="CKPT")
    p.add_argument("--caption", action="append")
    p.add_argument("--probe", metavar="CACHE")
    p.add_argument("--data", help="dataset directory with probe images / labels")
    p.add_argument("--targets", help="whitened TTEC cache supplying whitening stats")
    p.add_argument("--text-seed", dest="text_seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the full objective")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=2)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (ExperimentError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    text = json.dumps(result, indent=2, sort_keys=True)
    if getattr(args, "out", None) and args.command == "analyze":
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    if args.command == "gradcheck" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
