"""Command-line entry point: ``invometric <subcommand> [options]``.

Run options come from an optional ``key=value`` file (``--config``) and are
overridden by flags. Everything is validated and all inputs are loaded
before the first output file is written. Exit codes: 0 success, 2 bad
configuration, 3 unreadable or malformed data, 4 failed verification.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from ._io import atomic_write
from .datasets import DATASETS, BatchPlan, load_dataset, seeded_subset
from .exceptions import (
    ConfigError,
    DataFormatError,
    ShapeError,
    UnsupportedError,
    VerificationError,
)
from .losses import MSLossConfig
from .models import (
    LOSSES,
    PRESETS,
    build_preset,
    count_parameters,
    evaluate,
    export_kernel_maps,
    history_csv,
    load_weights,
    model_size_kb,
    parse_shape,
    save_weights,
    train,
)
from .optim import Adam
from .search import build_index, export_prediction_grid, recall_at_k, results_csv
from .tensor import thread_limit

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
BENCH_COLUMNS = ["model", "params", "size_kb", "seconds_per_epoch", "ce_loss", "ms_loss"]


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: str = "data"
    preset: str = "hybrid1"
    loss: str = "ce"
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    lr: float = 0.001
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    epsilon: float = 0.1
    classes_per_batch: int = 8
    train_subset: int | None = None
    test_subset: int | None = None
    subset_seed: int = 0
    out_dir: str = "out"
    threads: int | None = 1

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        for name in ("train_subset", "test_subset"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.ms_config()
        self.plan(self.loss)
        return self

    def ms_config(self):
        return MSLossConfig(self.alpha, self.beta, self.lam, self.epsilon)

    def plan(self, loss):
        return BatchPlan.for_loss(loss, self.batch_size, self.seed, self.classes_per_batch)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, text):
    kind = _FIELD_TYPES[key]
    if text.lower() in ("none", "") and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.split(' ')[0]}") from None
    return text


def parse_config_file(path):
    """``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def resolve_config(args) -> RunConfig:
    values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values).validate()


# ---------------------------------------------------------------- helpers


def _load_split(cfg: RunConfig, split):
    ds = load_dataset(cfg.dataset, cfg.data_dir, split)
    size = cfg.train_subset if split == "train" else cfg.test_subset
    return seeded_subset(ds, size, cfg.subset_seed)


def _parse_indices(text, n):
    try:
        indices = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse indices {text!r}") from None
    if not indices:
        raise ConfigError("no image indices given")
    bad = [i for i in indices if not 0 <= i < n]
    if bad:
        raise ConfigError(f"indices {bad} out of range for a split of {n} images")
    return indices


def _check_compatible(model, ds):
    if tuple(ds.image_shape) != tuple(model.spec.input_shape):
        raise ShapeError(f"weights expect {model.spec.input_shape} images, dataset has {ds.image_shape}")


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _print_epoch(rec):
    print(f"epoch {rec.epoch}: train_loss={rec.train_loss:.6f} test_loss={_fmt(rec.test_loss)} "
          f"({rec.seconds:.1f}s)", flush=True)


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig):
    train_ds = _load_split(cfg, "train")
    test_ds = _load_split(cfg, "test")
    model = build_preset(cfg.preset, train_ds.image_shape, cfg.seed, cfg.loss,
                         n_classes=10)
    history = train(model, train_ds, cfg.epochs, cfg.plan(cfg.loss), test_ds, cfg.ms_config(),
                    Adam(lr=cfg.lr), log=_print_epoch)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / "weights.bin")
    atomic_write(out / "history.csv", history_csv(history).encode())
    if history:
        print(f"final train_loss={history[-1].train_loss:.6f} test_loss={_fmt(history[-1].test_loss)}")
    print(f"wrote {out / 'weights.bin'} and {out / 'history.csv'}")
    return history


def retrieval_recalls(model, gallery, queries, ks=(1, 5, 10)):
    idx = build_index(model, gallery)
    emb = model.embed(queries.images)
    return {k: recall_at_k(idx, emb, queries.labels, k) for k in ks if k <= len(idx)}


def cmd_eval(cfg: RunConfig, weights):
    model = load_weights(weights)
    test_ds = _load_split(cfg, "test")
    gallery = _load_split(cfg, "train")
    _check_compatible(model, test_ds)
    report = {}
    if model.loss is not None:
        report["loss"] = evaluate(model, test_ds, cfg.ms_config())
        print(f"test_{model.loss}_loss={report['loss']:.6f}")
    for k, r in retrieval_recalls(model, gallery, test_ds).items():
        report[f"recall@{k}"] = r
        print(f"recall@{k}={r:.4f}")
    return report


def cmd_query(cfg: RunConfig, weights, indices, k, gallery_split="train", query_split="test"):
    model = load_weights(weights)
    gallery = _load_split(cfg, gallery_split)
    queries = gallery if query_split == gallery_split else _load_split(cfg, query_split)
    _check_compatible(model, gallery)
    _check_compatible(model, queries)
    rows = _parse_indices(indices, len(queries))
    limit = len(gallery) - (1 if query_split == gallery_split else 0)
    if not 1 <= k <= limit:
        raise ConfigError(f"k must be in [1, {limit}], got {k}")
    idx = build_index(model, gallery)
    emb = model.embed(queries.images[rows])
    # a query drawn from the gallery must not match itself
    exclude = rows if query_split == gallery_split else None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = export_prediction_grid(idx, queries.images[rows], emb, k, out / "montage.ppm", exclude)
    atomic_write(out / "results.csv", results_csv(idx, rows, queries.labels[rows], results).encode())
    print(f"wrote {out / 'montage.ppm'} and {out / 'results.csv'}")
    return results


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r["model"], r["params"], f"{r['size_kb']:.2f}", f"{r['seconds_per_epoch']:.3f}",
                    _fmt(r["ce_loss"]), _fmt(r["ms_loss"])])
    return buf.getvalue()


def cmd_bench(cfg: RunConfig, presets):
    """Train each preset under both losses; seconds_per_epoch averages both runs."""
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
    rows = []
    if presets:
        train_ds = _load_split(cfg, "train")
        test_ds = _load_split(cfg, "test")
        cfg.plan("ms")
    for name in presets:
        row = {"model": name}
        seconds = []
        for loss in LOSSES:
            model = build_preset(name, train_ds.image_shape, cfg.seed, loss)
            history = train(model, train_ds, cfg.epochs, cfg.plan(loss), None, cfg.ms_config(),
                            Adam(lr=cfg.lr))
            seconds += [r.seconds for r in history]
            row[f"{loss}_loss"] = evaluate(model, test_ds, cfg.ms_config())
        row["params"] = count_parameters(model)
        row["size_kb"] = model_size_kb(row["params"])
        row["seconds_per_epoch"] = float(np.mean(seconds)) if seconds else 0.0
        print(f"{name}: ce={row['ce_loss']:.4f} ms={row['ms_loss']:.4f}", flush=True)
        rows.append(row)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "bench.csv", bench_csv(rows).encode())
    print(f"wrote {out / 'bench.csv'}")
    return rows


def cmd_params(presets, shapes):
    lines = [f"{'preset':<9} {'input':<9} {'params':>8} {'size_kb':>9}"]
    table = {}
    for shape in shapes:
        for name in presets:
            n = count_parameters(build_preset(name, shape, loss=None))
            table[(name, tuple(shape))] = n
            lines.append(f"{name:<9} {'x'.join(map(str, shape)):<9} {n:>8} {model_size_kb(n):>9.2f}")
    for shape in shapes:
        big, small = table.get(("cnn3b", tuple(shape))), table.get(("hybrid1", tuple(shape)))
        if big and small:
            lines.append(f"hybrid1 vs cnn3b at {'x'.join(map(str, shape))}: "
                         f"{100 * (1 - small / big):.1f}% fewer parameters")
    print("\n".join(lines))
    return table


def cmd_gradcheck(seed=0, n_seeds=20, checks=None):
    if n_seeds < 1:
        raise ConfigError("seeds must be >= 1")
    results = gradcheck.run_all(seed, n_seeds, checks)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"gradient check failed: {', '.join(failed)}")
    return results


def cmd_kernel_maps(cfg: RunConfig, weights, indices, split="test"):
    model = load_weights(weights)
    ds = _load_split(cfg, split)
    _check_compatible(model, ds)
    rows = _parse_indices(indices, len(ds))
    paths = export_kernel_maps(model, ds.images[rows], cfg.out_dir, names=rows)
    print(f"wrote {len(paths)} graymaps to {cfg.out_dir}")
    return paths


# ------------------------------------------------------------------ parser


def _run_options(p, weights=False):
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="key=value file using the option names below")
    g.add_argument("--dataset", choices=DATASETS)
    g.add_argument("--data-dir", dest="data_dir")
    g.add_argument("--preset", choices=PRESETS)
    g.add_argument("--loss", choices=LOSSES)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--lam", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--classes-per-batch", dest="classes_per_batch", type=int)
    g.add_argument("--train-subset", dest="train_subset", type=int)
    g.add_argument("--test-subset", dest="test_subset", type=int)
    g.add_argument("--subset-seed", dest="subset_seed", type=int)
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("--threads", type=int)
    if weights:
        p.add_argument("--weights", required=True, help="weight file written by train")


def build_parser():
    parser = argparse.ArgumentParser(prog="invometric", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _run_options(sub.add_parser("train", help="train a preset, write weights.bin and history.csv"))
    _run_options(sub.add_parser("eval", help="test loss and recall@{1,5,10} of a weight file"), weights=True)

    p = sub.add_parser("query", help="top-k similarity search, write montage.ppm and results.csv")
    _run_options(p, weights=True)
    p.add_argument("--indices", required=True, help="comma-separated query image indices")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--gallery-split", choices=("train", "test"), default="train")
    p.add_argument("--query-split", choices=("train", "test"), default="test")

    p = sub.add_parser("bench", help="train presets under both losses, write bench.csv")
    _run_options(p)
    p.add_argument("--presets", default=",".join(PRESETS), help="comma-separated; empty for none")

    p = sub.add_parser("params", help="print parameter counts and float32 sizes")
    p.add_argument("--preset", action="append", choices=PRESETS, dest="presets")
    p.add_argument("--input-shape", action="append", dest="shapes", help="HxWxC, repeatable")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--check", action="append", dest="checks",
                   choices=[*gradcheck.LAYER_CHECKS, *gradcheck.END_TO_END_CHECKS])
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("kernel-maps", help="write per-pixel involution kernel norms as PGM files")
    _run_options(p, weights=True)
    p.add_argument("--indices", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    return parser


def dispatch(args):
    if args.command == "params":
        shapes = [parse_shape(s) for s in args.shapes] if args.shapes else [(28, 28, 1), (32, 32, 3)]
        return cmd_params(args.presets or list(PRESETS), shapes)
    if args.command == "gradcheck":
        with thread_limit(args.threads):
            return cmd_gradcheck(args.seed, args.seeds, args.checks)
    cfg = resolve_config(args)
    with thread_limit(cfg.threads):
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.weights)
        if args.command == "query":
            return cmd_query(cfg, args.weights, args.indices, args.k, args.gallery_split, args.query_split)
        if args.command == "bench":
            presets = [p.strip() for p in args.presets.split(",") if p.strip()]
            return cmd_bench(cfg, presets)
        if args.command == "kernel-maps":
            return cmd_kernel_maps(cfg, args.weights, args.indices, args.split)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError, UnsupportedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
