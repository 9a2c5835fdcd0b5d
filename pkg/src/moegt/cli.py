"""Command-line interface: ``moegt {gen,train,eval,explain,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O error,
4 numeric failure.  Outputs are byte-reproducible for identical flags and
inputs; wall-clock timestamps only appear in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, checkpoint
from . import config as cfgmod
from .data import generate_synthetic, read_events, split, write_events
from .data.batching import EncodedDataset
from .errors import ConfigError, DataError, NumericError
from .explain import (Subset, SubsetSelector, aggregate_attention, expert_specialization, export_bars,
                      export_diagnostics, export_heatmap, feature_ablation, predicted_labels, select)
from .metrics import classification_report
from .models import MODEL_KINDS, TransformerModel
from .training import EpochRecord, predict_scores, run_experiment

log = logging.getLogger("moegt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def blob_hash(path) -> str:
    """Content hash as computed by ``git hash-object``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Manifest:
    """Records the resolved configuration, inputs and every file written."""

    def __init__(self, command: str, root: Path, config: dict | None = None):
        self.root = root
        self.doc = {"command": command, "version": __version__, "config": config, "inputs": {},
                    "outputs": {}, "started": _now()}

    def add_input(self, path) -> str:
        digest = blob_hash(path)
        self.doc["inputs"][str(path)] = digest
        return digest

    def add_outputs(self, paths) -> None:
        for p in paths:
            p = Path(p)
            try:
                key = str(p.relative_to(self.root))
            except ValueError:
                key = str(p)
            self.doc["outputs"][key] = blob_hash(p)

    def write(self, path) -> Path:
        self.doc["finished"] = _now()
        return dump_json(self.doc, path)


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc}") from exc
    return path


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError("need at least one non-negative seed")
    return seeds


# --- gen -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.n_signal < 0 or args.n_background < 0:
        raise ConfigError("event counts must be non-negative")
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else Path("."))
    events = generate_synthetic(args.n_signal, args.n_background, args.seed)
    write_events(events, out)
    manifest = Manifest("gen", out.parent, {"n_signal": args.n_signal, "n_background": args.n_background,
                                           "seed": args.seed})
    manifest.add_outputs([out])
    manifest.write(out.with_name(out.name + ".manifest.json"))
    log.info("wrote %d events to %s", len(events), out)
    return EXIT_OK


# --- train -----------------------------------------------------------------------------

def _load_data(config: dict, out_dir: Path, manifest: Manifest):
    """Train and test events per the data section.

    Generated or split sets are written to ``out_dir/data``.  Returns the
    events, the written paths and a content hash per role (train, test).
    """
    d = config["data"]
    if d["train"] is None:
        g = d["generate"]
        events = generate_synthetic(g["n_signal"], g["n_background"], g["seed"])
    else:
        events = read_events(d["train"])
    if d["test"] is None:
        train_events, test_events = split(events, tuple(d["split"]), d["split_seed"])
        if d["train"] is not None:
            manifest.add_input(d["train"])
    else:
        train_events = events
        test_events = read_events(d["test"])
    written, hashes = [], {}
    for role, evs in (("train", train_events), ("test", test_events)):
        source = d[role]
        if source is not None and (role == "test" or d["test"] is not None):
            hashes[role] = manifest.add_input(source)
        else:
            path = _ensure_dir(out_dir / "data") / f"{role}.jsonl"
            write_events(evs, path)
            written.append(path)
            hashes[role] = blob_hash(path)
    return train_events, test_events, written, hashes


def write_loss_csv(history: list[EpochRecord], path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "ce_loss", "load_loss", "eval_auc"])
    for r in history:
        w.writerow([r.epoch, repr(r.ce_loss), repr(r.load_loss), "" if r.eval_auc is None else repr(r.eval_auc)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return Path(path)


def _explain_outputs(model, train_ds, test_ds, subset: str, attention: bool,
                     specialization: bool, out_dir: Path) -> list[Path]:
    paths = []
    if not isinstance(model, TransformerModel):
        return paths
    selector = SubsetSelector.parse(subset)
    ds = train_ds if selector.source == "train" else test_ds
    if attention:
        paths += export_heatmap(aggregate_attention(model, ds, selector), out_dir)
    if specialization and model.config.kind == "mgt":
        index = select(ds, selector, _maybe_predictions(model, ds, selector))
        paths.append(export_bars(expert_specialization(model, ds, index), out_dir))
    return paths


def _maybe_predictions(model, ds, selector):
    if selector.subset in (Subset.TRAIN_ALL, Subset.TEST_ALL):
        return None
    return predicted_labels(model, ds)


def cmd_train(args) -> int:
    overrides: dict = {}
    if args.model:
        overrides.setdefault("model", {})["kind"] = args.model
    for flag, key in (("seeds", "seeds"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("w_load", "w_load"), ("lr", "lr")):
        value = getattr(args, flag)
        if value is not None:
            overrides.setdefault("training", {})[key] = value
    for flag, key in (("data", "train"), ("test_data", "test")):
        value = getattr(args, flag)
        if value is not None:
            overrides.setdefault("data", {})[key] = value
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    config = cfgmod.resolve(cfgmod.load_file(args.config) if args.config else None, overrides)
    tc = cfgmod.train_config(config)
    out_dir = _ensure_dir(args.out)
    manifest = Manifest("train", out_dir, config)
    if args.config:
        manifest.add_input(args.config)
    train_events, test_events, written, data_hashes = _load_data(config, out_dir, manifest)
    manifest.add_outputs(written)
    result = run_experiment(tc, train_events, test_events, jobs=config["jobs"])
    train_ds = EncodedDataset(train_events, result.scaler, tc.model.pe_dim)
    test_ds = EncodedDataset(test_events, result.scaler, tc.model.pe_dim)
    for run, report in zip(result.runs, result.reports):
        seed_dir = _ensure_dir(out_dir / f"seed_{run.seed}")
        lineage = {"seed": run.seed, "data": data_hashes, "training": config["training"]}
        paths = [checkpoint.save(checkpoint.Checkpoint(run.model, result.scaler, lineage),
                                 seed_dir / "checkpoint.json"),
                 dump_json(report.to_dict(), seed_dir / "metrics.json"),
                 write_loss_csv(run.history, seed_dir / "loss.csv")]
        paths += _explain_outputs(run.model, train_ds, test_ds, config["explain"]["subset"],
                                  config["explain"]["attention"], config["explain"]["specialization"], seed_dir)
        manifest.add_outputs(paths)
        log.info("seed %d: test AUC %.5f accuracy %.5f", run.seed, report.auc, report.accuracy)
    manifest.add_outputs([dump_json(result.summary.to_dict(), out_dir / "summary.json")])
    manifest.doc["seeds"] = list(tc.seeds)
    manifest.write(out_dir / "manifest.json")
    print(json.dumps({"mean": result.summary.mean, "std": result.summary.std}, sort_keys=True))
    return EXIT_OK


# --- eval --------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = checkpoint.load(args.checkpoint)
    events = read_events(args.data)
    ds = EncodedDataset(events, ckpt.scaler, ckpt.model.config.pe_dim)
    if len(ds) == 0:
        raise DataError(f"{args.data}: no events")
    report = classification_report(predict_scores(ckpt.model, ds), ds.labels)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# --- explain ------------------------------------------------------------------------------

def cmd_explain(args) -> int:
    ckpt = checkpoint.load(args.checkpoint)
    model = ckpt.model
    if not isinstance(model, TransformerModel):
        raise ConfigError(f"explain needs an mgt or gt checkpoint, got {model.config.kind}")
    selector = SubsetSelector.parse(args.subset, args.nodes)
    out_dir = _ensure_dir(args.out)
    manifest = Manifest("explain", out_dir, {"subset": args.subset, "nodes": args.nodes,
                                             "weighted": args.weighted})
    manifest.add_input(args.checkpoint)
    test_events = read_events(args.data)
    manifest.add_input(args.data)
    pe = model.config.pe_dim
    test_ds = EncodedDataset(test_events, ckpt.scaler, pe)
    if selector.source == "train":
        if not args.train_data:
            raise ConfigError("subset train-all needs --train-data")
        ds = EncodedDataset(read_events(args.train_data), ckpt.scaler, pe)
        manifest.add_input(args.train_data)
    else:
        ds = test_ds
    predictions = _maybe_predictions(model, ds, selector)
    paths = export_heatmap(aggregate_attention(model, ds, selector, predictions), out_dir)
    if model.config.kind == "mgt":
        index = select(ds, selector, predictions)
        paths.append(export_bars(expert_specialization(model, ds, index, weighted=args.weighted), out_dir))
    paths.append(export_diagnostics(test_events, predict_scores(model, test_ds), out_dir))
    manifest.add_outputs(paths)
    manifest.write(out_dir / "manifest.json")
    log.info("wrote %d files to %s", len(paths), out_dir)
    return EXIT_OK


# --- ablate -------------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    overrides = {}
    if args.model:
        overrides["model"] = {"kind": args.model}
    if args.seeds is not None:
        overrides["training"] = {"seeds": args.seeds}
    config = cfgmod.resolve(cfgmod.load_file(args.config) if args.config else None, overrides)
    groups = cfgmod.load_file(args.groups_file)
    bad = [k for k, v in groups.items() if not isinstance(v, list) or not all(isinstance(s, str) for s in v)]
    if bad:
        raise ConfigError(f"{args.groups_file}: groups must map names to lists of cells, bad: {', '.join(bad)}")
    out_dir = _ensure_dir(args.out)
    manifest = Manifest("ablate", out_dir, config)
    manifest.add_input(args.groups_file)
    train_events, test_events, written, _ = _load_data(config, out_dir, manifest)
    manifest.add_outputs(written)
    baseline, rows = feature_ablation(cfgmod.train_config(config), train_events, test_events, groups,
                                      jobs=config["jobs"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "features", "auc", "delta"])
    w.writerow(["baseline", "", repr(baseline), repr(0.0)])
    for r in rows:
        w.writerow([r.group, " ".join(r.features), repr(r.auc), repr(r.delta)])
    table = out_dir / "ablation.csv"
    table.write_text(buf.getvalue(), encoding="utf-8")
    manifest.add_outputs([table])
    manifest.write(out_dir / "manifest.json")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moegt", description="Mixture-of-experts graph transformer for event graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic JSONL dataset")
    g.add_argument("--n-signal", type=int, default=20000)
    g.add_argument("--n-background", type=int, default=20000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model per seed")
    t.add_argument("--config", help="YAML run configuration")
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--seeds", type=_parse_seeds, help="comma-separated, e.g. 0,1,2")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--w-load", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--data", help="training JSONL (overrides data.train)")
    t.add_argument("--test-data", help="test JSONL (overrides data.test)")
    t.add_argument("--jobs", type=int, help="train seeds in parallel processes")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="attention maps, expert routing counts, kinematic diagnostics")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True, help="test JSONL")
    x.add_argument("--train-data", help="training JSONL, needed for subset train-all")
    x.add_argument("--subset", default="test-all", choices=[s.value for s in Subset])
    x.add_argument("--nodes", type=int, choices=(6, 7), help="restrict to 6- or 7-node events")
    x.add_argument("--weighted", action="store_true", help="sum gate values instead of counting")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)

    a = sub.add_parser("ablate", help="retrain with feature groups hidden; AUC drop per group")
    a.add_argument("--config", help="YAML run configuration")
    a.add_argument("--groups-file", required=True, help="YAML/JSON mapping group name -> list of cells")
    a.add_argument("--model", choices=MODEL_KINDS)
    a.add_argument("--seeds", type=_parse_seeds)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"moegt: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"moegt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"moegt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
