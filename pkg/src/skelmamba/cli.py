"""Batch command-line interface.

Exit status: 0 on success, 1 on invalid input or configuration, 2 on numeric failure.
Diagnostics go to standard error; machine-readable results to files or standard output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import NumericError, SkelMambaError, UsageError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def apply_thread_limit() -> int | None:
    """Honor SKELMAMBA_THREADS for the compiled kernels and the BLAS pool."""
    raw = os.environ.get("SKELMAMBA_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SKELMAMBA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SKELMAMBA_THREADS must be >= 1, got {n}")
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    threadpool_limits(limits=n)
    return n


# ------------------------------------------------------------------ config
def load_run_config(source: str | None, seed: int | None = None):
    """Read a run config (bundled preset name or JSON path) into model and train configs.

    Layout: ``{"model": {"preset": "desk", ...overrides}, "train": {...}}``.
    """
    from .model import ModelConfig
    from .train import TrainConfig

    if source is None:
        obj = {}
    elif Path(source).is_file():
        try:
            obj = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise SkelMambaError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    else:
        try:
            obj = json.loads(resources.files("skelmamba.configs").joinpath(f"run_{source}.json").read_text())
        except FileNotFoundError:
            raise UsageError(f"config {source!r} is neither a file nor a bundled preset") from None
    if not isinstance(obj, dict) or set(obj) - {"model", "train"}:
        raise UsageError("run config must be an object with optional 'model' and 'train' sections")
    m = dict(obj.get("model", {}))
    preset = m.pop("preset", "desk")
    model_cfg = ModelConfig.preset(preset, **m)
    t = dict(obj.get("train", {}))
    train_preset = t.pop("preset", None)
    train_cfg = TrainConfig.paper(**t) if train_preset == "paper" else TrainConfig(**t)
    if seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=seed)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


# ------------------------------------------------------------- subcommands
def cmd_synth(args) -> int:
    from .data import save_dataset, synth_generate

    ds = synth_generate(args.classes, args.per_class, args.seed, T=args.frames, start_id=args.start_id)
    save_dataset(ds, args.out)
    _log(f"wrote {len(ds)} sequences ({args.classes} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import plots
    from .data import MODALITY_SETS, ensemble, load_dataset
    from .model import SkelMamba, save_checkpoint
    from .train import evaluate, train

    model_cfg, train_cfg = load_run_config(args.config, args.seed)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
        train_cfg.validate()
    data = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    if data.num_classes != model_cfg.num_classes:
        model_cfg = dataclasses.replace(model_cfg, num_classes=data.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "modalities": {}}
    scores = []
    for modality in MODALITY_SETS[args.modality]:
        cfg = dataclasses.replace(train_cfg, modality=modality)
        model = SkelMamba(model_cfg, rng=cfg.seed)
        _log(f"training {modality} model: {model.num_parameters()} parameters, {cfg.epochs} epochs")
        records = train(
            model,
            data,
            cfg,
            val_set=val,
            log_path=out / f"metrics_{modality}.jsonl",
            timestamps=not args.no_timestamp,
            callback=lambda r: _log(
                f"  epoch {r['epoch']:4d} loss {r['train_loss']:.4f} acc {r['train_acc']:.3f}"
                + (f" val {r['val_acc']:.3f}" if r["val_acc"] is not None else "")
            ),
        )
        save_checkpoint(out / f"model_{modality}.skmb", model, meta={"modality": modality, "classes": data.classes})
        plots.loss_curves(records, out / f"curves_{modality}.svg", title=modality)
        entry = {"final_train_acc": records[-1]["train_acc"], "final_train_loss": records[-1]["train_loss"]}
        if val is not None:
            res = evaluate(model, val, modality)
            entry["val_acc"] = res.accuracy
            scores.append(res.scores)
            plots.confusion_heatmap(res.confusion, val.classes, out / f"confusion_{modality}.svg", title=modality)
        report["modalities"][modality] = entry
    if val is not None and scores:
        fused = ensemble(scores)
        report["ensemble_val_acc"] = float((fused.argmax(-1) == val.labels()).mean())
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return EXIT_OK


def _model_scores(checkpoint: str, data):
    from .model import load_checkpoint
    from .train import evaluate

    model, meta = load_checkpoint(checkpoint)
    modality = meta.get("modality", "joint")
    if model.config.V != data.topology.num_joints:
        raise UsageError(f"{checkpoint}: model has {model.config.V} joints, data has {data.topology.num_joints}")
    return evaluate(model, data, modality), modality


def cmd_eval(args) -> int:
    from . import plots
    from .data import load_dataset

    data = load_dataset(args.data)
    res, modality = _model_scores(args.checkpoint, data)
    report = {"checkpoint": args.checkpoint, "modality": modality, "accuracy": res.accuracy,
              "confusion": res.confusion.tolist()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        plots.confusion_heatmap(res.confusion, data.classes, out / "confusion.svg", title=modality)
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    from .data import ensemble, load_dataset

    data = load_dataset(args.data)
    paths = [p for p in args.checkpoints.split(",") if p]
    if not paths:
        raise UsageError("--checkpoints needs at least one path")
    results = [_model_scores(p, data) for p in paths]
    fused = ensemble([r.scores for r, _ in results])
    labels = data.labels()
    report = {
        "members": [{"checkpoint": p, "modality": m, "accuracy": r.accuracy} for p, (r, m) in zip(paths, results)],
        "accuracy": float((fused.argmax(-1) == labels).mean()),
    }
    _emit(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import gradient_suite

    results = gradient_suite(args.scale, args.seed)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{r.name:20s} max_rel_err={r.error:.3e} tol={r.tolerance:.0e} {'ok' if r.ok else 'FAIL'}")
    if failed:
        _log(f"gradient check failed for: {', '.join(r.name for r in failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .checks import scan_oracle

    if args.cases < 1:
        raise UsageError("--cases must be positive")
    res = scan_oracle(args.cases, args.seed)
    ok = res.max_diff <= args.tol
    print(f"cases={res.cases} max_abs_diff={res.max_diff:.3e} tol={args.tol:.0e} {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .data import load_dataset, synth_generate
    from .train import ABLATION_ROWS, component_variant, run_ablation, stream_variant

    model_cfg, train_cfg = load_run_config(args.config, None)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
        train_cfg.validate()
    if args.data:
        train_set = load_dataset(args.data)
        if not args.test:
            raise UsageError("--data requires --test")
        test_set = load_dataset(args.test)
    else:
        train_set = synth_generate(4, 50, args.data_seed)
        test_set = synth_generate(4, 20, args.data_seed, start_id=10_000)
    model_cfg = dataclasses.replace(model_cfg, num_classes=train_set.num_classes)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    variants = {}
    for combo in [c for c in args.streams.split(",") if c]:
        name = "+".join(ch for ch in "smt" if ch in combo)
        variants[f"streams:{name}"] = stream_variant(model_cfg, combo)
    for row in [r for r in args.pgm_components.split(",") if r]:
        if row not in ABLATION_ROWS:
            raise UsageError(f"unknown PGM component row {row!r}; choose from {','.join(ABLATION_ROWS)}")
        variants[f"pgm:{row}"] = component_variant(model_cfg, row)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def progress(res):
        _log(f"{res.name:24s} mean acc {res.mean:.4f} over seeds {seeds}: {res.accuracies}")

    results = run_ablation(variants, train_cfg, train_set, test_set, seeds, log_dir=out, progress=progress)
    report = {r.name: {"accuracies": r.accuracies, "mean": r.mean} for r in results}
    if out:
        (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import tensor as tn
    from .model import SkelMamba, describe

    model_cfg, _ = load_run_config(args.config, None)
    info = describe(model_cfg)
    model = SkelMamba(model_cfg, rng=0).astype(np.float32)
    x = np.random.default_rng(0).standard_normal((args.batch, model_cfg.T_in, model_cfg.V, model_cfg.C_in)).astype(np.float32)
    model.eval()
    times = []
    with tn.no_grad():
        model(x)  # warm-up: kernel compilation and caches
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1000.0)
    info.update({
        "instantiated_params": model.num_parameters(),
        "batch": args.batch,
        "forward_ms_median": float(np.median(times)),
        "forward_ms_per_sample": float(np.median(times)) / args.batch,
    })
    _emit(info)
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skelmamba", description="Skeleton sequence classification with part-grouped state-space models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic gait dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--start-id", type=int, default=0)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model per modality")
    t.add_argument("--config", default="desk", help="bundled preset (tiny, desk, paper) or JSON file")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    t.add_argument("--modality", choices=("j", "jb", "jbm"), default="j")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-timestamp", action="store_true", help="write null wall-clock fields for byte-stable logs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="score-level ensemble of checkpoints")
    en.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    en.add_argument("--data", required=True)
    en.set_defaults(func=cmd_ensemble)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--scale", default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle", help="recurrent scan versus convolution kernel")
    o.add_argument("--cases", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--tol", type=float, default=1e-10)
    o.set_defaults(func=cmd_oracle)

    a = sub.add_parser("ablate", help="stream and component ablation grid")
    a.add_argument("--config", default="desk")
    a.add_argument("--streams", default="s,t,m,st,sm,tm,stm", help="comma-separated stream combinations")
    a.add_argument("--pgm-components", default=",".join(("1d", "c2d", "token", "fusion", "attention")))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--epochs", type=int)
    a.add_argument("--data")
    a.add_argument("--test")
    a.add_argument("--data-seed", type=int, default=7)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="parameter count, MAC estimate and forward wall-clock")
    b.add_argument("--config", default="desk")
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        apply_thread_limit()
        return args.func(args)
    except NumericError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (SkelMambaError, ValueError, KeyError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
