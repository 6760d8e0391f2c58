"""Command-line entry point: ``vood <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure
(non-finite loss or degenerate features).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import (
    OUTPUT_ROOT_ENV,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .data import (
    SpuriousSpec,
    TensorBatches,
    export_image_folders,
    from_tensor,
    generate_spurious_benchmark,
    load_split,
    save_benchmark,
)
from .errors import ConfigParseError, DataError, DegenerateFeature, InvalidSpec, NumericFailure
from .experiment import evaluate, fit, load_data_split, maybe_tune_odin
from .metrics import config_digest
from .model import evaluate_accuracy, load_checkpoint, synthesis_from_dict
from .postprocess import PostprocessorSet, read_scores, write_scores
from .synthesis import compute_saliency, sparsify, synthesize

log = logging.getLogger("vood")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _read_structured(path: str) -> dict:
    try:
        return yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigParseError(path, f"cannot read: {e}") from e


def cmd_gen_benchmark(args) -> int:
    raw = _read_structured(args.spec) if args.spec else {}
    spec = SpuriousSpec.from_dict(raw)
    bench = generate_spurious_benchmark(spec, seed=args.seed)
    out = save_benchmark(bench, args.out)
    if args.export_folders:
        export_image_folders(bench, out / "folders")
    counts = {s: m["count"] for s, m in bench.manifest["splits"].items()}
    print(f"wrote benchmark to {out}: {counts}")
    return EXIT_OK


def _run_config(args, train: bool = False):
    overrides = list(args.set or [])
    if train and args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if train and args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args, train=True)
    out = cfg.output_dir()
    save_config(cfg, out / "config.yaml")
    x, y = load_data_split(cfg.data, cfg.data.train)
    result = fit(cfg, x, y, out_dir=out, resume=args.resume)
    msg = f"trained {len(result.history)} epochs in {result.seconds:.1f}s"
    if cfg.data.val_id:
        xv, yv = load_data_split(cfg.data, cfg.data.val_id)
        msg += f"; val_id accuracy {evaluate_accuracy(result.model, TensorBatches(xv, yv, 256)):.2f}%"
    print(msg)
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    return EXIT_OK


def _checkpoint_config(args, payload):
    """Run config from --config if given, else the one stored in the checkpoint."""
    if args.config:
        return _run_config(args)
    stored = payload["metadata"].get("run_config")
    if stored is None:
        raise ConfigParseError("config", "checkpoint carries no run config; pass --config")
    return config_from_dict(apply_overrides(stored, args.set or []))


def cmd_eval(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, payload)
    if args.postprocessors:
        cfg.postprocessors = args.postprocessors.split(",")
        config_from_dict(config_to_dict(cfg))  # re-validate names
    id_entry = args.id or cfg.data.test_id
    x_id, _ = load_data_split(cfg.data, id_entry)
    ood_entries = dict(item.split("=", 1) for item in args.ood) if args.ood else cfg.data.ood
    oods = {name: load_data_split(cfg.data, ref)[0] for name, ref in ood_entries.items()}
    pps = maybe_tune_odin(model, cfg, PostprocessorSet(odin=cfg.odin))
    ev = evaluate(model, x_id, oods, cfg.postprocessors, pps, id_name=Path(id_entry).name,
                  seed=cfg.seed, digest=config_digest(config_to_dict(cfg)))
    ev.report.metadata["odin"] = {"temperature": pps.odin.temperature, "epsilon": pps.odin.epsilon}
    out = Path(args.out) if args.out else cfg.output_dir() / "eval"
    json_path, csv_path = ev.report.write(out, "report")
    write_scores(out / "scores.csv", ev.score_rows)
    print(ev.report.summary())
    print(f"report: {json_path} {csv_path}")
    return EXIT_OK


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def cmd_preview(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    synth = synthesis_from_dict(payload["synthesis"])
    if args.data:
        x, y = load_split(args.data)
    else:
        cfg = _checkpoint_config(args, payload)
        x, y = load_data_split(cfg.data, cfg.data.train)
    if (y < 0).any():
        raise DataError("preview needs labelled images")
    g = torch.Generator().manual_seed(args.seed)
    idx = torch.randperm(len(x), generator=g)[: args.n]
    x, y = x[idx], y[idx]
    step = args.step if args.step is not None else payload["metadata"].get("epoch", 0)
    G = compute_saliency(model, x, y, synth.saliency_target)
    G_inv, _ = sparsify(G, synth.p_inv)
    x_out = synthesize(model, x, y, synth, step, g)
    plt = _figure()
    fig, axes = plt.subplots(len(x), 3, figsize=(6, 2 * len(x)), squeeze=False)
    imgs, outs = from_tensor(x), from_tensor(x_out)
    heat = G_inv.abs().sum(1).numpy()
    for i in range(len(x)):
        for ax, img, title in ((axes[i, 0], imgs[i], "x"), (axes[i, 1], heat[i], "|G_inv|"),
                               (axes[i, 2], outs[i], "x'")):
            ax.imshow(img, cmap="magma" if img.ndim == 2 else None)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title)
    fig.suptitle(f"{synth.method}, step {step}")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_score_hist(args) -> int:
    rows = []
    for path in args.scores:
        try:
            rows += read_scores(path)
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"cannot read scores from {path}: {e}") from e
    if not rows:
        raise DataError("no scores to plot")
    names = list(dict.fromkeys(r["postprocessor"] for r in rows))
    if args.postprocessors:
        names = [n for n in names if n in args.postprocessors.split(",")]
    plt = _figure()
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        sub = [r for r in rows if r["postprocessor"] == name]
        values = np.array([r["score"] for r in sub])
        bins = np.linspace(values.min(), values.max() + 1e-12, args.bins + 1)
        for label in dict.fromkeys(r["label"] for r in sub):
            ax.hist([r["score"] for r in sub if r["label"] == label], bins=bins, alpha=0.5,
                    density=True, label=label)
        ax.set_title(name)
        ax.set_xlabel("score")
        ax.legend(fontsize=7)
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vood", description=__doc__.splitlines()[0],
                                epilog=f"Relative output paths are resolved under ${OUTPUT_ROOT_ENV} when set.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-benchmark", help="generate the synthetic spurious benchmark")
    g.add_argument("--spec", help="YAML/JSON file with SpuriousSpec fields")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--export-folders", action="store_true", help="also write PNG image folders")
    g.set_defaults(func=cmd_gen_benchmark)

    def config_args(q, required=True):
        q.add_argument("--config", required=required, help="run config (YAML)")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")

    t = sub.add_parser("train", help="train a classifier from a run config")
    config_args(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score ID and OOD sets and write a report")
    e.add_argument("--checkpoint", required=True)
    config_args(e, required=False)
    e.add_argument("--id", help="ID set: split name or image folder")
    e.add_argument("--ood", action="append", metavar="NAME=REF", help="OOD set (repeatable)")
    e.add_argument("--postprocessors", help="comma-separated names")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("preview-outliers", help="render x, |G_inv| and x' side by side")
    v.add_argument("--checkpoint", required=True)
    config_args(v, required=False)
    v.add_argument("--data", help="labelled split reference (bench_dir:split or folder)")
    v.add_argument("--n", type=int, default=6)
    v.add_argument("--step", type=int, help="schedule step for alpha (default: checkpoint epoch)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_preview)

    h = sub.add_parser("score-hist", help="overlaid ID/OOD score histograms")
    h.add_argument("--scores", nargs="+", required=True, help="score CSV files from eval")
    h.add_argument("--postprocessors")
    h.add_argument("--bins", type=int, default=40)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_score_hist)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigParseError, InvalidSpec) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, DegenerateFeature) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
