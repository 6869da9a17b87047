"""Command line entry point: ``vaegrad <subcommand> ...``.

Every subcommand writes into ``--out-dir`` together with ``manifest.json``
and the resolved ``config.ini``.  Stage seeds come from ``--seed`` (or
``[run] seed``), so running the stages one at a time gives the same files
as ``vaegrad pipeline``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .data_io import (Dataset, export_curve, export_embedding, export_json, export_labels,
                      export_points, read_embedding, read_labels, read_points)
from .vae import load_model, save_model

log = logging.getLogger("vaegrad")


def read_matrix(path) -> Dataset:
    """Points file (``index,label,x0..``) or embedding file (``index,x,y``)."""
    with open(path, encoding="utf-8", newline="") as fh:
        header = next(csv.reader(fh), [])
    if header[:2] == ["index", "label"]:
        return read_points(path)
    if header == ["index", "x", "y"]:
        return Dataset(read_embedding(path), note=f"csv:{Path(path).name}")
    raise ValueError(f"{path}: unrecognised CSV header {header}")


def _config(args):
    overrides = {"run": {"seed": str(args.seed)}} if args.seed is not None else None
    return pl.make_config(args.preset, args.config, overrides)


def _run(args, cfg, subcommand: str, inputs=()):
    run = pl.Run(args.out_dir, subcommand, cfg, inputs=list(inputs))
    (run.out_dir / "config.ini").write_text(pl.config_text(cfg), encoding="utf-8")
    run.outputs.append("config.ini")
    return run


def _with_run(run, stage: str, body):
    try:
        result = pl._stage(stage, body)
    except Exception as exc:
        run.fail(exc)
        raise
    run.finish()
    return result


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = _config(args)
    run = _run(args, cfg, "gen-data")

    def body():
        ds = pl.stage_data(cfg)
        export_points(run.path("data.csv"), ds)
        return ds

    ds = _with_run(run, "data", body)
    print(f"wrote {len(ds)} points to {run.out_dir / 'data.csv'}")


def cmd_train(args):
    cfg = _config(args)
    run = _run(args, cfg, "train", [args.data])

    def body():
        model = pl.stage_train(cfg, read_points(args.data))
        save_model(model, run.path("model.json"))
        return model

    model = _with_run(run, "train", body)
    print(f"final training loss {model.history[-1]:.6g}")


def cmd_process(args):
    cfg = _config(args)
    run = _run(args, cfg, "process", [args.model, args.data])

    def body():
        out = pl.stage_process(cfg, load_model(args.model), read_points(args.data),
                               args.threads)
        export_points(run.path("processed.csv"), out)

    _with_run(run, "process", body)
    print(f"wrote {run.out_dir / 'processed.csv'}")


def cmd_embed(args):
    cfg = _config(args)
    run = _run(args, cfg, "embed", [args.model, args.data])

    def body():
        latent = pl.stage_encode(load_model(args.model), read_points(args.data))
        export_points(run.path("latent.csv"), latent)
        if cfg.get("embed", "space") == "tsne":
            export_embedding(run.path("embedding.csv"), pl.stage_embed(cfg, latent))

    _with_run(run, "embed", body)
    print(f"wrote {', '.join(run.outputs[1:])} to {run.out_dir}")


def cmd_cluster(args):
    cfg = _config(args)
    run = _run(args, cfg, "cluster", [args.data])

    def body():
        labeling = pl.stage_cluster(cfg, read_matrix(args.data).points)
        export_labels(run.path("labels.csv"), labeling)
        return labeling

    lab = _with_run(run, "cluster", body)
    print(f"{lab.n_clusters} clusters, {lab.n_noise} noise points")


def cmd_scan_k(args):
    cfg = _config(args)
    run = _run(args, cfg, "scan-k", [args.data])

    def body():
        res = pl.stage_scan(cfg, read_matrix(args.data).points)
        export_curve(run.path("curve.csv"), res.curves[0])
        export_json(run.path("scan.json"), pl.scan_summary(res))
        return res

    res = _with_run(run, "scan-k", body)
    print(f"mean most persistent count {res.mean:.2f} (mode {res.mode()}, "
          f"{res.no_signal} runs without signal)")


def cmd_acc(args):
    cfg = _config(args)
    run = _run(args, cfg, "acc", [args.data, args.labels])

    def body():
        truth = read_points(args.data).labels
        if truth is None:
            raise ValueError(f"{args.data} carries no ground-truth labels")
        out = pl.accuracy_summary(cfg, truth, read_labels(args.labels))
        export_json(run.path("acc.json"), out)
        return out

    out = _with_run(run, "acc", body)
    print(" ".join(f"{k} {v:.4f}" for k, v in sorted(out.items())))


def cmd_pipeline(args):
    if args.manifest:
        summary = pl.rerun_from_manifest(args.manifest, args.out_dir, args.threads)
    else:
        summary = pl.run_pipeline(_config(args), args.out_dir, args.threads)
    parts = [f"n={summary['n']}", f"clusters={summary['n_clusters']}"]
    if "acc" in summary:
        parts.append(f"acc={summary['acc']:.4f}")
    if "scan" in summary:
        parts.append(f"scan mean={summary['scan']['mean']:.2f} mode={summary['scan']['mode']}")
    print(" ".join(parts))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "--spec", dest="config", help="INI config file")
    common.add_argument("--preset", choices=sorted(pl.PRESETS), help="built-in config preset")
    common.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    common.add_argument("--out-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads; affects speed only")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vaegrad", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vaegrad {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate or load a dataset")
    s.set_defaults(func=cmd_gen_data)
    s = sub.add_parser("train", parents=[common], help="train a VAE")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train)
    s = sub.add_parser("process", parents=[common], help="density-gradient ascent")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_process)
    s = sub.add_parser("embed", parents=[common], help="encode and t-SNE")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_embed)
    s = sub.add_parser("cluster", parents=[common], help="cluster points or an embedding")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_cluster)
    s = sub.add_parser("scan-k", parents=[common], help="suggest a cluster count")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_scan_k)
    s = sub.add_parser("acc", parents=[common], help="clustering accuracy")
    s.add_argument("--data", required=True, help="points file with true labels")
    s.add_argument("--labels", required=True, help="labels.csv from cluster")
    s.set_defaults(func=cmd_acc)
    s = sub.add_parser("pipeline", parents=[common], help="run every stage")
    s.add_argument("--manifest", help="re-run the config recorded in a manifest.json")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("vaegrad: error [config]: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except pl.StageError as exc:
        print(f"vaegrad: error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, configparser.Error) as exc:
        print(f"vaegrad: error [config]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
