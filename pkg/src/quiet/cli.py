"""Command-line entry point: generate, train, eval, gradcheck, analyze, sweep.

Every command resolves a flat config (defaults, preset, ``--config`` file,
``--set key=value``), writes ``resolved-config.json`` into ``--out`` and
prints tab-separated lines on stdout. JSON reports and PNG figures land in
the output directory.

Exit codes: 0 success, 1 failed check, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import diff as D
from .data import (generate_synthetic, label_marginals, load_dataset, manifest_path, save_dataset,
                   split_dataset)
from .errors import ConfigError, DataError, NumericalError
from .layers import TASKS
from .model import (ModelParams, collate, evaluate, fit, forward, load_checkpoint, loss, run_matrix,
                    save_checkpoint)

log = logging.getLogger("quiet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _tsv(*fields):
    print("\t".join(_fmt(f) for f in fields), flush=True)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _outdir(cfg) -> Path:
    out = Path(cfg["paths.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(C.dump(cfg))
    return out


def _datasets(cfg):
    """(manifest, train, dev, test) from explicit splits, one file, or the generator."""
    fr = (float(cfg["split.train"]), float(cfg["split.dev"]))
    fractions = (fr[0], fr[1], 1.0 - fr[0] - fr[1])
    if min(fractions) < 0:
        raise ConfigError("split fractions must be non-negative and sum to at most 1")
    if cfg["paths.train"]:
        if not cfg["paths.dev"]:
            raise ConfigError("paths.train needs paths.dev")
        manifest, train = load_dataset(cfg["paths.train"])
        _, dev = load_dataset(cfg["paths.dev"])
        test = load_dataset(cfg["paths.test"])[1] if cfg["paths.test"] else dev
        return manifest, train, dev, test
    if cfg["paths.data"]:
        manifest, samples = load_dataset(cfg["paths.data"])
    else:
        manifest, samples = generate_synthetic(int(cfg["generate.n_dialogues"]), C.data_dims(cfg),
                                               context_limit=3, seed=int(cfg["seed"]),
                                               recipe=C.recipe(cfg))
    train, dev, test = split_dataset(samples, fractions, seed=int(cfg["seed"]))
    if not train or not dev:
        raise ConfigError(f"split of {len(samples)} dialogues leaves train or dev empty")
    return manifest, train, dev, test or dev


# -- commands -----------------------------------------------------------------------


def cmd_generate(cfg) -> int:
    out = _outdir(cfg)
    manifest, samples = generate_synthetic(int(cfg["generate.n_dialogues"]), C.data_dims(cfg),
                                           context_limit=3, seed=int(cfg["seed"]),
                                           recipe=C.recipe(cfg))
    path = out / "dialogues.jsonl"
    save_dataset(path, samples, manifest)
    _tsv("file", path)
    _tsv("manifest", manifest_path(path))
    _tsv("label", "class", "count", "fraction")
    for key, counts in label_marginals(samples).items():
        for cls, n in enumerate(counts):
            _tsv(key, cls, n, n / len(samples))
    for key, acc in manifest.recipe["oracle_accuracy"].items():
        _tsv("oracle_accuracy", key, acc)
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = _outdir(cfg)
    manifest, train, dev, test = _datasets(cfg)
    mcfg, tcfg = C.model_config(cfg, manifest.dims), C.train_config(cfg)
    params = ModelParams.init(mcfg, tcfg.seed)
    _tsv("epoch", "learning_rate", "train_loss", "dev_loss", *(f"dev_f1_{t}" for t in mcfg.tasks))

    def progress(row):
        _tsv(row["epoch"], row["learning_rate"], row["train_loss"], row["dev_loss"],
             *(row["dev_micro_f1"][t] for t in mcfg.tasks))

    best, history = fit(train, dev, params, mcfg, tcfg, progress=progress)
    save_checkpoint(out / "checkpoint.json", best, mcfg)
    _json(out / "history.json", history)
    metrics = {"train": evaluate(train, best, mcfg), "dev": evaluate(dev, best, mcfg),
               "test": evaluate(test, best, mcfg)}
    _json(out / "metrics.json", {"best_epoch": history["best_epoch"], "splits": metrics})
    _tsv("split", "task", "micro_f1", "accuracy")
    for split, per_task in metrics.items():
        for t, m in per_task.items():
            _tsv(split, t, m["micro_f1"], m["accuracy"])
    if cfg["report.figures"]:
        from .plotting import plot_history
        _tsv("figure", plot_history(history, out / "history.png"))
    return EXIT_OK


def cmd_eval(cfg) -> int:
    if not cfg["paths.checkpoint"]:
        raise ConfigError("eval needs paths.checkpoint (--checkpoint)")
    out = _outdir(cfg)
    params, mcfg = load_checkpoint(cfg["paths.checkpoint"])
    split = cfg["eval.split"]
    if split not in ("train", "dev", "test", "all"):
        raise ConfigError(f"eval.split must be train, dev, test or all, got {split!r}")
    manifest, train, dev, test = _datasets(cfg)
    for m, d in manifest.dims.items():
        if int(mcfg.dims[m]) != int(d):
            raise ConfigError(f"checkpoint expects {m} dim {mcfg.dims[m]}, data has {d}")
    samples = {"train": train, "dev": dev, "test": test, "all": train + dev + test}[split]
    metrics = evaluate(samples, params, mcfg)
    _json(out / "metrics.json", {"split": split, "count": len(samples), "tasks": metrics})
    _tsv("split", "task", "precision", "recall", "micro_f1", "accuracy")
    for t, m in metrics.items():
        _tsv(split, t, m["precision"], m["recall"], m["micro_f1"], m["accuracy"])
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    """Finite-difference check of every trainable tensor on a tiny model."""
    out = _outdir(cfg)
    n = int(cfg["gradcheck.batch_size"])
    manifest, samples = generate_synthetic(n, C.data_dims(cfg), context_limit=3, seed=int(cfg["seed"]),
                                           recipe=C.recipe(cfg))
    mcfg, tcfg = C.model_config(cfg, manifest.dims), C.train_config(cfg)
    params = ModelParams.init(mcfg, tcfg.seed)
    batch = collate(samples, mcfg)

    def objective():
        o = forward(batch, params, mcfg, train=True, dropout=tcfg.dropout, dropout_seed=[tcfg.seed])
        return loss(o, batch.labels, tcfg, params, mcfg)

    ops = [s.strip() for s in str(cfg["gradcheck.sabotage"]).split(",") if s.strip()]
    tol = float(cfg["gradcheck.tolerance"])
    with D.sabotage(*ops):
        errors = D.gradient_errors(objective, params.trainable(mcfg), h=float(cfg["gradcheck.step"]))
    _tsv("tensor", "max_rel_error", "status")
    for name, err in errors.items():
        _tsv(name, err, "ok" if err < tol else "FAIL")
    worst = float(max(errors.values()))
    passed = bool(worst < tol)
    _json(out / "gradcheck.json", {"tolerance": tol, "step": float(cfg["gradcheck.step"]),
                                   "errors": errors, "max_error": worst, "passed": passed})
    _tsv("max", worst, "ok" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_FAIL


def _bank_pairs(value):
    pairs = []
    for item in str(value).split(","):
        if not item.strip():
            continue
        parts = item.strip().split(":")
        if len(parts) != 2 or any(p not in TASKS for p in parts):
            raise ConfigError(f"bad bank pair {item!r}; expected task:task with tasks {list(TASKS)}")
        pairs.append(tuple(parts))
    if not pairs:
        raise ConfigError("analyze.pairs is empty")
    return pairs


def cmd_analyze(cfg) -> int:
    if not cfg["paths.checkpoint"]:
        raise ConfigError("analyze needs paths.checkpoint (--checkpoint)")
    from .layers import incompatibility_report
    out = _outdir(cfg)
    params, _ = load_checkpoint(cfg["paths.checkpoint"])
    count = int(cfg["analyze.pair_count"])
    if count < 1:
        raise ConfigError("analyze.pair_count must be positive")
    reports = []
    _tsv("bank_a", "bank_b", "pair_count", "mean_commutator_norm", "mean_relative_entropy",
         "nonzero_fraction")
    for i, (a, b) in enumerate(_bank_pairs(cfg["analyze.pairs"])):
        rep = incompatibility_report(params.banks[a], params.banks[b], count,
                                     rng_seed=[int(cfg["seed"]), i],
                                     indexwise=bool(cfg["analyze.indexwise"]))
        reports.append(rep)
        _tsv(a, b, rep["pair_count"], rep["mean_commutator_norm"], rep["mean_relative_entropy"],
             rep["nonzero_fraction"])
    _json(out / "analysis.json", {"reports": reports})
    if cfg["report.figures"]:
        from .plotting import plot_incompatibility
        _tsv("figure", plot_incompatibility(reports, out / "incompatibility.png"))
    return EXIT_OK


def _subsets(value, parse):
    text = str(value).strip()
    if not text:
        return None
    return [parse(s) for s in text.split("|") if s.strip()]


def cmd_sweep(cfg) -> int:
    out = _outdir(cfg)
    manifest, train, dev, test = _datasets(cfg)
    mcfg, tcfg = C.model_config(cfg, manifest.dims), C.train_config(cfg)
    variants = [v.strip() for v in str(cfg["sweep.variants"]).split(",") if v.strip()]
    _tsv("kind", "tasks", "modalities", "context_limit", "seed", "epochs_run",
         *(f"f1_{t}" for t in TASKS))

    def progress(row):
        _tsv(row["kind"], ",".join(row["tasks"]), ",".join(row["modalities"]), row["context_limit"],
             row["seed"], row["epochs_run"],
             *(row["metrics"][t]["micro_f1"] if t in row["metrics"] else "" for t in TASKS))

    rows = run_matrix(mcfg, tcfg, (train, dev, test), grid=bool(cfg["sweep.grid"]),
                      context=bool(cfg["sweep.context"]), variants=variants,
                      task_subsets=_subsets(cfg["sweep.tasks"], C.tasks_of),
                      modality_subsets=_subsets(cfg["sweep.modalities"], C.modalities_of),
                      progress=progress)
    _json(out / "matrix.json", {"rows": rows})
    if cfg["report.figures"] and rows:
        from .plotting import plot_matrix
        _tsv("figure", plot_matrix(rows, out / "matrix.png"))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}

# Convenience flags, each a shorthand for one config key.
SHORTCUTS = {
    "seed": "seed",
    "out": "paths.out",
    "n": "generate.n_dialogues",
    "data": "paths.data",
    "train": "paths.train",
    "dev": "paths.dev",
    "test": "paths.test",
    "checkpoint": "paths.checkpoint",
    "split": "eval.split",
    "pair_count": "analyze.pair_count",
    "sabotage": "gradcheck.sabotage",
}


HELP = {
    "generate": "write a synthetic dialogue dataset and its manifest",
    "train": "fit a model; writes checkpoint, history, metrics and a loss figure",
    "eval": "score a checkpoint on one split",
    "gradcheck": "finite-difference check of every trainable tensor on a tiny model",
    "analyze": "commutator norms and relative entropies between trained measurement banks",
    "sweep": "train the task x modality grid, the context sweep and ablation variants",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quiet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON file of dotted keys")
        p.add_argument("--preset", choices=sorted(C.PRESETS))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "generate":
            p.add_argument("--n", type=int, help="number of dialogues")
        if name in ("train", "eval", "sweep"):
            for flag in ("data", "train", "dev", "test"):
                p.add_argument(f"--{flag}", help=f"dataset file ({flag})")
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", help="checkpoint.json from train")
        if name == "eval":
            p.add_argument("--split", choices=("train", "dev", "test", "all"))
        if name == "analyze":
            p.add_argument("--pair-count", dest="pair_count", type=int)
        if name == "gradcheck":
            p.add_argument("--sabotage", help=argparse.SUPPRESS)
    return parser


def resolve_args(args) -> dict:
    overrides = list(args.set)
    for attr, key in SHORTCUTS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    fallback = "micro" if args.command == "gradcheck" else C.DEFAULTS["preset"]
    return C.resolve(args.config, overrides, args.preset, fallback=fallback)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_args(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
