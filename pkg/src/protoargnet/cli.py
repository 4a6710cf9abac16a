"""``protoargnet`` command line: gen-data, train, eval, sparsify, explain.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
Run directories default to ``$PROTOARGNET_RUNS`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import explain as E
from . import model as M
from . import qbaf as Q
from . import shapes
from .config import ConfigError, RunConfig, read_file
from .trainer import DivergenceError, evaluate, train

log = logging.getLogger("protoargnet")

RUN_ROOT_ENV = "PROTOARGNET_RUNS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _run_dir(out: str | None, default_name: str) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    path = Path(out) if out else root / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--model.n_prototypes=32`` or ``--model.n_prototypes 32``."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra):
            i += 1
            value = extra[i]
        else:
            raise UsageError(f"override {tok!r} needs a value")
        out[key] = value
        i += 1
    return out


def _load_data(path: str) -> shapes.Dataset:
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return shapes.load(path)


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return M.load_checkpoint(path)


def _features(params: M.ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([M.forward(params, images[i:i + batch_size]).features.data
                           for i in range(0, len(images), batch_size)])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    ds = shapes.generate(args.seed, args.n)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    shapes.save(ds, out)
    c0, c1 = ds.class_counts()
    print(f"wrote {len(ds)} samples to {out}")
    print(f"class 0: {c0}")
    print(f"class 1: {c1}")
    return 0


def cmd_train(args, overrides: dict[str, str]) -> int:
    file_values = read_file(args.config) if args.config else {}
    cfg = RunConfig.build(file_values, overrides)
    ds = _load_data(args.data)
    run = _run_dir(args.out, f"train-seed{cfg.train.seed}")
    (run / "config.txt").write_text(cfg.to_text())
    params, report, projection = train(cfg.model, ds, cfg.train)
    M.save_checkpoint(run / "model.ckpt", params, projection)
    (run / "report.jsonl").write_text(report.to_lines())
    log.info("training took %.1fs", report.wall_clock)
    print(f"initial test accuracy: {report.initial_test_acc:.4f}")
    print(f"pre-projection test accuracy: {report.pre_projection_test_acc:.4f}")
    print(f"final test accuracy: {report.final_test_acc:.4f}")
    print(f"checkpoint: {run / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    params, _ = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data)
    acc = evaluate(params, ds, args.split)
    print(f"{args.split} accuracy: {acc:.4f}")
    return 0


def sparsify_run(params: M.ModelParams, ds: shapes.Dataset, ratio: float, seed: int = 0,
                 reference: str = "train", evaluation: str = "test"):
    """Build, cluster and sparsify the classifier's QBAF; returns ``(qbaf, metrics)``."""
    layers = params.mlp_layers()
    ref = _features(params, ds.images(ds.split(reference)))
    ev_idx = ds.split(evaluation)
    ev = _features(params, ds.images(ev_idx))
    labels = ds.labels(ev_idx)
    qb = Q.sparsify_mlp(layers, ref, ratio, seed, source_hash=params.digest())
    metrics = Q.unfaithfulness(layers, qb, ev, labels)
    orig = Q.mlp_activations(layers, ev)[-1].argmax(axis=1)
    metrics["model_accuracy"] = float(np.mean(orig == labels))
    metrics["ratio"] = ratio
    metrics["hidden_arguments"] = len(qb.hidden_arguments())
    k = params.config.n_classes
    metrics["cognitive_complexity"] = Q.cognitive_complexity(qb, k, include_outputs=True)
    metrics["cognitive_complexity_paper"] = Q.cognitive_complexity(qb, k, include_outputs=False)
    return qb, metrics


def cmd_sparsify(args) -> int:
    if not 0 <= args.ratio < 1:
        raise UsageError(f"--ratio must lie in [0, 1), got {args.ratio}")
    params, _ = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data)
    run = _run_dir(args.out, f"sparsify-{args.ratio:g}")
    qb, metrics = sparsify_run(params, ds, args.ratio, args.seed, args.reference, args.split)
    Q.save_json(qb, run / "qbaf.json")
    (run / "qbaf.graph").write_text(Q.to_graph_text(qb))
    (run / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(f"ratio: {args.ratio:g}")
    print(f"accuracy: {metrics['accuracy']:.4f} (unsparsified {metrics['model_accuracy']:.4f})")
    print(f"hidden unfaithfulness: {metrics['hidden']:.6g}")
    print(f"output unfaithfulness: {metrics['output']:.6g}")
    print(f"cognitive complexity: {metrics['cognitive_complexity']} "
          f"(without outputs: {metrics['cognitive_complexity_paper']})")
    return 0


def cmd_explain(args) -> int:
    params, projection = _load_ckpt(args.checkpoint)
    if not Path(args.qbaf).is_file():
        raise FileNotFoundError(f"QBAF not found: {args.qbaf}")
    qb = Q.load_json(args.qbaf)
    ds = _load_data(args.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for dataset of size {len(ds)}")
    if qb.source_hash != params.digest():
        raise UsageError("QBAF and checkpoint hashes differ; rebuild the QBAF from this checkpoint")
    sample = ds.samples[args.index]
    ex = E.explain(params, qb, sample.image, projection, image_index=args.index)
    run = _run_dir(args.out, f"explain-{args.index}")
    E.export(ex, "structured-text", run / "explanation.json")
    E.export(ex, "graph-file", run / "qbaf_strengths.graph")
    files = E.export(ex, "raster-bundle", run / "rasters", scale=args.scale)
    print(f"sample {args.index}: label {sample.label}, predicted {ex.predicted_class} "
          f"(p={ex.probability:.4f})")
    print(f"similarity scores: {', '.join(f'{v:.4f}' for v in ex.ss)}")
    print(f"wrote {len(files)} rasters and 2 text artifacts to {run}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoargnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate and save a SHAPES dataset")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model; extra --section.key=value flags override config")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out")

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test", "all"))

    s = sub.add_parser("sparsify", help="cluster the classifier into a smaller QBAF")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--reference", default="train", choices=("train", "test", "all"))
    s.add_argument("--split", default="test", choices=("train", "test", "all"))

    x = sub.add_parser("explain", help="export a local explanation for one sample")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--qbaf", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--out")
    x.add_argument("--scale", type=int, default=8, help="raster upscaling factor")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train":
            return cmd_train(args, _parse_overrides(extra))
        if extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "gen-data":
            if args.n < 2:
                raise UsageError(f"--n must be >= 2, got {args.n}")
            return cmd_gen_data(args)
        return {"eval": cmd_eval, "sparsify": cmd_sparsify, "explain": cmd_explain}[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
