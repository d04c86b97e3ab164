"""Command-line front end: generate, train, adapt, eval, ablate.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import torch

from .adapter import adapt
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .datagen import Dataset, generate
from .encoder import init_model
from .errors import AcidsError, InvalidConfig, NonFiniteLoss
from .evaluator import evaluate_model, export_embeddings
from .experiments import TABLE_VARIANTS, VARIANTS, run_grid
from .presets import PRESETS, get_preset
from .trainer import resume, train_source

log = logging.getLogger("acids")
LOCK_NAME = ".acids.lock"
METHOD_ALIASES = {"acids": "acids", "entropy": "entropy_baseline", "entropy_baseline": "entropy_baseline",
                  "none": "none"}


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "message": record.getMessage()}
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def setup_logging(level: str, out_dir: Path | None = None, name: str = "run") -> None:
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(level.upper())
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(JsonFormatter())
    root.addHandler(stream)
    if out_dir is not None:
        fh = logging.FileHandler(out_dir / f"{name}.log.jsonl", encoding="utf-8")
        fh.setFormatter(JsonFormatter())
        root.addHandler(fh)


def num_threads() -> int:
    raw = os.environ.get("ACIDS_NUM_THREADS")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"ACIDS_NUM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidConfig("ACIDS_NUM_THREADS must be >= 1")
    return n


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive, non-blocking lock so only one command writes to ``out_dir`` at a time."""
    out_dir.mkdir(parents=True, exist_ok=True)
    fh = open(out_dir / LOCK_NAME, "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise AcidsError(f"{out_dir} is locked by another acids process") from None
        fh.write(str(os.getpid()))
        fh.flush()
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


class JsonLines:
    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self.fh.close()


def _ids(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _data_preset(args) -> str | None:
    """Preset named by a dataset manifest passed on the command line, if any."""
    for key in ("data", "target"):
        path = getattr(args, key, None)
        if path:
            manifest = Path(path) / "manifest.json" if Path(path).is_dir() else Path(path)
            if manifest.is_file():
                name = json.loads(manifest.read_text(encoding="utf-8")).get("name")
                if name in PRESETS:
                    return name
    return None


def load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_preset(getattr(args, "preset", None) or _data_preset(args) or "vector-4c-4d")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg


# --- commands -------------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    preset = get_preset(args.preset)
    spec = preset.spec(cfg.seed)
    dataset = generate(spec)
    out = Path(cfg.out_dir)
    path = dataset.save(out)
    log.info("wrote %s (%s)", path, dataset.digest())
    print(json.dumps({"manifest": str(path), "sha256": dataset.digest()}))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    dataset = Dataset.load(args.data)
    t = cfg.train
    if args.epochs is not None:
        t.epochs = args.epochs
    if args.sources:
        cfg.sources = _ids(args.sources)
    t.merged_source_shared_bn = t.merged_source_shared_bn or args.merged_source
    t.no_domain_mi = t.no_domain_mi or args.no_domain_mi
    if args.single_source is not None:
        t.single_source = args.single_source
    if args.no_bn_alignment:
        t.no_bn_alignment = True
        cfg.model.shared_bn = True
    if t.dump_dir is None:
        t.dump_dir = str(out / "diagnostics")
    cfg.save(out / "config.json")
    metrics = JsonLines(out / "train_metrics.jsonl")
    try:
        if args.resume:
            model, state = resume(args.resume, dataset, t, model_config=cfg.model, sources=cfg.sources,
                                  pipeline=cfg.transforms, on_record=metrics)
        else:
            model = init_model(cfg.model)
            state = train_source(model, dataset, t, sources=cfg.sources, pipeline=cfg.transforms,
                                 on_record=metrics)
    except NonFiniteLoss as exc:
        print(f"error: {exc}\njoint dump: {exc.dump_path}", file=sys.stderr)
        return 1
    finally:
        metrics.close()
    ckpt = save_checkpoint(out / "checkpoint.bin", model, state, t, extra={"dataset": dataset.digest()})
    src = evaluate_model(model, dataset, sorted(model.source_domains))
    summary = {"checkpoint": str(ckpt), "epochs": state.epoch, "steps": state.step,
               "stopped_early": state.stopped_early, "source_accuracy": src.accuracy,
               "nmi_class": src.nmi_class, "nmi_domain": src.nmi_domain}
    print(json.dumps(summary))
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    dataset = Dataset.load(args.target)
    if args.target_domain is not None:
        tid = args.target_domain
    else:
        candidates = dataset.manifest.ids_with_role("target") or dataset.manifest.domain_ids
        if len(candidates) != 1:
            raise InvalidConfig(f"manifest holds domains {candidates}; pick one with --target-domain")
        (tid,) = candidates
    target = dataset.select([tid])
    a = cfg.adapt
    a.method = METHOD_ALIASES[args.method]
    if args.epochs is not None:
        a.epochs = args.epochs
    cfg.save(out / "config.json")
    metrics = JsonLines(out / "adapt_metrics.jsonl")
    try:
        adapt(model, target, a, cfg.transforms, on_record=metrics)
    finally:
        metrics.close()
    path = save_checkpoint(out / "adapted.bin", model, None, ckpt.train_config, a,
                           extra={**ckpt.extra, "target_domain": tid})
    m = evaluate_model(model, target, tid)
    print(json.dumps({"checkpoint": str(path), "target_domain": tid, "accuracy": m.accuracy,
                      "nmi_class": m.nmi_class}))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    model = load_checkpoint(args.checkpoint).model
    dataset = Dataset.load(args.data)
    domains = args.domain or [d for d in dataset.manifest.domain_ids if d in model.domains]
    for d in domains:
        dataset.manifest.domain(d)
        model.bank(d)
    metrics = evaluate_model(model, dataset, domains, head=args.head, mapping=args.mapping)
    doc = {"domains": domains, **metrics.to_dict()}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.export_embeddings:
        header = export_embeddings(model, dataset, domains, args.export_embeddings)
        doc["embeddings"] = str(header)
    print(json.dumps(doc))
    return 0


def _ablate_seed(job):
    cfg_dict, seed, data, variants, fractions, alphas, threads = job
    torch.set_num_threads(threads)
    cfg = RunConfig.from_dict(cfg_dict)

    def make_dataset(s):
        return Dataset.load(data) if data else generate(get_preset(cfg.preset).spec(s))

    return [asdict(c) for c in run_grid(make_dataset, cfg, [seed], variants, fractions, alphas)]


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    if args.preset:
        cfg.preset = args.preset
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    variants = args.variants.split(",") if args.variants else list(TABLE_VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise InvalidConfig(f"unknown variants {unknown} (known: {sorted(VARIANTS)})")
    seeds = _ids(args.seeds)
    fractions = _floats(args.fractions)
    alphas = _floats(args.alphas) if args.alphas else []
    cfg.save(out / "config.json")
    workers = min(num_threads(), len(seeds))
    jobs = [(cfg.to_dict(), s, args.data, variants, fractions, alphas, 1) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_seed, jobs))
    else:
        results = [_ablate_seed(j) for j in jobs]
    cells = [c for r in results for c in r]

    cell_cols = ["variant", "seed", "fraction", "alpha", "target_accuracy", "source_accuracy", "nmi_class",
                 "nmi_domain", "seconds", "error"]
    with open(out / "ablation_cells.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cell_cols)
        for c in cells:
            w.writerow([c[k] for k in cell_cols])

    target = cfg.target if cfg.target is not None else 3
    rows: dict[str, list[float]] = {}
    for c in cells:
        label = c["variant"]
        if c["alpha"] is not None:
            label = f"full@alpha={c['alpha']:g}"
        elif c["fraction"] != 1.0:
            label = f"{c['variant']}@fraction={c['fraction']:g}"
        rows.setdefault(label, [])
        if c["error"] is None and c["target_accuracy"] is not None:
            rows[label].append(c["target_accuracy"])
    table = out / "ablation_table.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", f"target_{target}_median", "n_seeds"])
        for label, accs in rows.items():
            w.writerow([label, f"{statistics.median(accs):.4f}" if accs else "", len(accs)])
    failed = sum(c["error"] is not None for c in cells)
    print(json.dumps({"cells": len(cells), "failed": failed, "table": str(table)}))
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="acids", description=__doc__, allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], allow_abbrev=False, help="write a synthetic dataset")
    g.add_argument("--preset", default="vector-4c-4d")

    t = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train on source domains")
    t.add_argument("--data", required=True, help="dataset directory holding manifest.json")
    t.add_argument("--sources", help="comma-separated source domain ids")
    t.add_argument("--epochs", type=int)
    t.add_argument("--merged-source", action="store_true", help="pool sources through one BN bank")
    t.add_argument("--single-source", type=int, metavar="D", help="train on domain D only")
    t.add_argument("--no-domain-mi", action="store_true", help="drop the domain MI terms")
    t.add_argument("--no-bn-alignment", action="store_true", help="one shared BN bank for every domain")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a training checkpoint")

    # deliberately no way to name source data here
    a = sub.add_parser("adapt", parents=[common], allow_abbrev=False, help="source-free target adaptation")
    a.add_argument("checkpoint")
    a.add_argument("--target", required=True, help="target dataset directory")
    a.add_argument("--target-domain", type=int)
    a.add_argument("--method", default="acids", choices=sorted(METHOD_ALIASES))
    a.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="score a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--domain", type=int, action="append", help="domain id (repeatable)")
    e.add_argument("--head", default="main", choices=["main", "over"])
    e.add_argument("--mapping", default="hungarian", choices=["hungarian", "majority"])
    e.add_argument("--export-embeddings", metavar="PATH", help="write trunk features to PATH.{f32,meta.i32,json}")

    b = sub.add_parser("ablate", parents=[common], allow_abbrev=False, help="run the ablation grid")
    b.add_argument("--preset", help="dataset preset regenerated per seed")
    b.add_argument("--data", help="fixed dataset directory instead of a preset")
    b.add_argument("--seeds", default="0,1,2,3,4")
    b.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    b.add_argument("--fractions", default="1.0")
    b.add_argument("--alphas", default="", help="smoothing values for the alpha sweep")
    b.add_argument("--epochs", type=int)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        torch.set_num_threads(num_threads())
        out = Path(cfg.out_dir)
        with output_lock(out):
            setup_logging(args.log_level, out, args.command)
            start = time.perf_counter()
            code = COMMANDS[args.command](args, cfg)
            log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
            return code
    except (AcidsError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
