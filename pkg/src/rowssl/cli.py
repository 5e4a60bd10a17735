"""Command-line entry point.

Subcommands cover the whole pipeline on one run directory:

  synth    sample a Gaussian-blob embedding pool        -> dataset.emb
  split    carve labeled/unlabeled/test sets            -> *.emb, split.json
  train    run the training loop                        -> checkpoint.ckpt, train_log.csv
  eval     score the checkpoint across protocols        -> report.csv, report.json
  report   aggregate runs into a summary + SVG charts   -> summary.csv, *.svg

Configuration is a JSON file merged over built-in defaults; --seed/--out and
repeatable --set section.key=value flags override individual entries. The
ROWSSL_THREADS environment variable caps the process's worker threads.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .data import (
    BlobSpec,
    SplitSpec,
    concat_datasets,
    generate_blobs,
    load_dataset,
    make_long_tailed_split,
    save_dataset,
    split_leftover,
)
from .evaluation import (
    PROTOCOL_ORDER,
    EvalProtocol,
    evaluate,
    write_report_csv,
    write_report_json,
)
from .reporting import (
    collect_run,
    render_accuracy_chart,
    render_loss_chart,
    write_summary_csv,
    write_train_log_csv,
)
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "run",
    "blobs": {
        "classes": 8,
        "dim": 32,
        "separation": 20.0,
        "std": 1.0,
        "samples_per_class": 120,
    },
    "split": {
        "known": 4,
        "novel": 4,
        "n_max": 60,
        "gamma_l": 10.0,
        "gamma_u": 10.0,
        "mode": "mcar",
        "labeled_fraction": 0.5,
    },
    "train": {
        "epochs": 200,
        "batch_size": 128,
        "learning_rate": 0.1,
        "momentum": 0.9,
        "lambda_rep": 0.35,
        "tau_s": 0.1,
        "tau_t_start": 0.07,
        "tau_t_end": 0.04,
        "tau_t_warmup_epochs": 30,
        "epsilon": 4.0,
        "n_prototypes": 0,
        "lambda_tail": 0.9,
        "queue_size": 4096,
        "knn_k": 15,
        "tau_min": 0.05,
        "tau_max": 1.0,
        "lambda_var": 1.0,
        "tau_sup": 0.07,
        "key_momentum": 0.999,
        "class_count": "known",
        "class_count_init": 0,
        "tail_queue_cap": 256,
        "encoder_hidden": 128,
        "feature_dim": 64,
        "projector_hidden": 256,
        "projector_dim": 256,
        "noise_scale": 0.1,
        "drop_fraction": 0.1,
        "eval_every": 0,
    },
    "eval": {
        "protocols": ["train", "test-recluster", "test-rematch", "test-inductive"],
        "phi_fraction": 0.1,
    },
}


def thread_cap() -> int:
    raw = os.environ.get("ROWSSL_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"ROWSSL_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ValueError(f"ROWSSL_THREADS must be >= 1, got {cap}")
        return cap
    return os.cpu_count() or 1


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ValueError(f"config key {where!r} must be a section")
            _merge(base[key], val, where)
        else:
            base[key] = val


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValueError(f"--set needs key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ValueError(f"unknown config section {part!r} in {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key {dotted!r}")
    if isinstance(node[parts[-1]], dict):
        raise ValueError(f"config key {dotted!r} is a section, not a value")
    node[parts[-1]] = value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config {args.config}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ValueError(f"config {args.config}: top level must be an object")
        _merge(cfg, user)
    for assignment in getattr(args, "set", None) or []:
        _apply_set(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out"] = args.out
    return cfg


def _outdir(cfg: dict) -> str:
    path = cfg["out"]
    os.makedirs(path, exist_ok=True)
    return path


def _save_effective(cfg: dict, outdir: str) -> None:
    with open(os.path.join(outdir, "effective_config.json"), "w", newline="\n") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _path(outdir: str, override: str | None, default_name: str) -> str:
    return override if override else os.path.join(outdir, default_name)


def cmd_synth(args, cfg) -> int:
    outdir = _outdir(cfg)
    blobs = cfg["blobs"]
    spec = BlobSpec(
        n_classes=blobs["classes"],
        dim=blobs["dim"],
        separation=blobs["separation"],
        std=blobs["std"],
        samples_per_class=blobs["samples_per_class"],
        seed=cfg["seed"],
    )
    pool = generate_blobs(spec)
    path = os.path.join(outdir, "dataset.emb")
    save_dataset(pool, path)
    _save_effective(cfg, outdir)
    print(f"wrote {path}: {pool.n_samples} samples, dim {pool.dim}, {pool.n_classes} classes")
    return 0


def cmd_split(args, cfg) -> int:
    outdir = _outdir(cfg)
    pool = load_dataset(_path(outdir, args.data, "dataset.emb"))
    section = cfg["split"]
    spec = SplitSpec(
        n_known=section["known"],
        n_novel=section["novel"],
        n_max=section["n_max"],
        gamma_l=section["gamma_l"],
        gamma_u=section["gamma_u"],
        mismatch=section["mode"],
        labeled_fraction=section["labeled_fraction"],
        seed=cfg["seed"],
    )
    labeled, unlabeled = make_long_tailed_split(pool, spec)
    test = split_leftover(pool, [labeled, unlabeled], spec)
    save_dataset(labeled, os.path.join(outdir, "labeled.emb"))
    save_dataset(unlabeled, os.path.join(outdir, "unlabeled.emb"))
    save_dataset(test, os.path.join(outdir, "test.emb"))
    manifest = {
        "mode": spec.mismatch,
        "gamma_l": spec.gamma_l,
        "gamma_u": spec.gamma_u,
        "n_known": spec.n_known,
        "n_novel": spec.n_novel,
        "labeled_counts": labeled.class_counts().tolist(),
        "unlabeled_counts": unlabeled.class_counts().tolist(),
        "test_counts": test.class_counts().tolist(),
    }
    with open(os.path.join(outdir, "split.json"), "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _save_effective(cfg, outdir)
    print(
        f"split {pool.n_samples} pool samples -> "
        f"{labeled.n_samples} labeled, {unlabeled.n_samples} unlabeled, {test.n_samples} test"
    )
    return 0


def cmd_train(args, cfg) -> int:
    outdir = _outdir(cfg)
    labeled = load_dataset(_path(outdir, args.labeled, "labeled.emb"))
    unlabeled = load_dataset(_path(outdir, args.unlabeled, "unlabeled.emb"))
    train_ds = concat_datasets(labeled, unlabeled)
    tcfg = TrainConfig(**cfg["train"], seed=cfg["seed"])
    state, log = fit(train_ds, tcfg)
    ckpt_path = os.path.join(outdir, "checkpoint.ckpt")
    save_checkpoint(state, ckpt_path)
    write_train_log_csv(log, os.path.join(outdir, "train_log.csv"))
    _save_effective(cfg, outdir)
    last = log[-1]["total"] if log else float("nan")
    print(
        f"trained {tcfg.epochs} epochs ({state.step} steps) on {train_ds.n_samples} samples; "
        f"final loss {last:.4f}; wrote {ckpt_path}"
    )
    return 0


def cmd_eval(args, cfg) -> int:
    outdir = _outdir(cfg)
    state = load_checkpoint(_path(outdir, args.checkpoint, "checkpoint.ckpt"))
    labeled = load_dataset(_path(outdir, args.labeled, "labeled.emb"))
    unlabeled = load_dataset(_path(outdir, args.unlabeled, "unlabeled.emb"))
    train_ds = concat_datasets(labeled, unlabeled)
    counts = train_ds.class_counts()
    if args.protocols:
        names = [p.strip() for p in args.protocols.split(",") if p.strip()]
    else:
        names = list(cfg["eval"]["protocols"])
    for name in names:
        EvalProtocol.from_name(name)  # reject unknown names before any work
    phi_fraction = cfg["eval"]["phi_fraction"]

    test_names = [n for n in names if n != "train"]
    test_ds = None
    if test_names:
        test_ds = load_dataset(_path(outdir, args.test, "test.emb"))

    need_train = "train" in names or "test-inductive" in names
    train_report = None
    if need_train:
        train_report = evaluate(
            state, train_ds, EvalProtocol("train"),
            train_counts=counts, phi_fraction=phi_fraction,
        )

    def run_protocol(name: str):
        proto = EvalProtocol.from_name(name)
        matching = train_report.matching if name == "test-inductive" else None
        return evaluate(
            state, test_ds, proto,
            train_counts=counts, train_matching=matching, phi_fraction=phi_fraction,
        )

    results = {}
    if test_names:
        workers = min(thread_cap(), len(test_names))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {name: pool.submit(run_protocol, name) for name in test_names}
            results = {name: fut.result() for name, fut in futures.items()}
    if "train" in names:
        results["train"] = train_report

    ordered = [results[n] for n in PROTOCOL_ORDER if n in results]
    write_report_csv(ordered, os.path.join(outdir, "report.csv"))
    write_report_json(ordered, os.path.join(outdir, "report.json"))
    for rep in ordered:
        bacc = rep.bacc["all"]
        bacc_text = "n/a" if bacc is None else f"{bacc:.4f}"
        print(f"{rep.protocol}: acc={rep.acc['all']:.4f} bacc={bacc_text}")
    return 0


def cmd_report(args, cfg) -> int:
    outdir = _outdir(cfg)
    run_dirs = args.runs if args.runs else [outdir]
    runs = [collect_run(d) for d in run_dirs]
    summary_path = os.path.join(outdir, "summary.csv")
    write_summary_csv(runs, summary_path)
    written = [summary_path]
    loss_path = os.path.join(outdir, "loss_curves.svg")
    if render_loss_chart(runs, loss_path):
        written.append(loss_path)
    acc_path = os.path.join(outdir, "accuracy.svg")
    if render_accuracy_chart(runs, acc_path):
        written.append(acc_path)
    print("wrote " + ", ".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rowssl",
        description="long-tailed open-world semi-supervised training on embedding vectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config merged over the defaults")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="run directory (created if missing)")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override one config entry, e.g. --set train.epochs=50",
        )

    p = sub.add_parser("synth", help="sample a Gaussian-blob embedding pool")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="carve labeled/unlabeled/test sets from a pool")
    common(p)
    p.add_argument("--data", help="pool file (default: OUT/dataset.emb)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train on the labeled + unlabeled split")
    common(p)
    p.add_argument("--labeled", help="labeled set (default: OUT/labeled.emb)")
    p.add_argument("--unlabeled", help="unlabeled set (default: OUT/unlabeled.emb)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint across evaluation protocols")
    common(p)
    p.add_argument("--labeled", help="labeled set (default: OUT/labeled.emb)")
    p.add_argument("--unlabeled", help="unlabeled set (default: OUT/unlabeled.emb)")
    p.add_argument("--test", help="held-out set (default: OUT/test.emb)")
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT/checkpoint.ckpt)")
    p.add_argument(
        "--protocols",
        help="comma-separated protocol names (default: from config)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate runs into a summary table and charts")
    common(p)
    p.add_argument("runs", nargs="*", help="run directories (default: the --out directory)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except Exception as exc:  # argparse exits on its own errors before this
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
