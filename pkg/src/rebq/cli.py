"""Command-line surface: pretrain, gen-data, run, sweep, report.

Configuration comes from a JSON file matching RunConfig; individual flags
override file values, `--set key=value` overrides anything else, and
`--seed` derives every seed stream from one root. Relative output
directories are rooted at $REBQ_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import MultimodalBackbone, PretrainConfig, pretrain
from .bench import save_corpus, synth_generate
from .runner import (ExperimentError, Report, RunConfig, emit_report,
                     run_experiment)

OUTPUT_ROOT_ENV = "REBQ_OUTPUT_ROOT"

SWEEP_AXES = ("eta", "lam", "pool_size", "memory_pool_size", "prompt_len",
              "prompted_layers")


def _resolve_output(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return str(Path(root) / p)
    return str(p)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = RunConfig.from_dict(json.load(fh))
    else:
        cfg = RunConfig()
    overrides = {}
    for flag, attr in (("variant", "variant"), ("eta", "eta"), ("lam", "lam"),
                       ("epochs", "epochs"), ("backbone_checkpoint", "backbone_checkpoint"),
                       ("output_dir", "output_dir")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[attr] = val
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if overrides:
        d = cfg.to_dict()
        unknown = set(overrides) - set(d)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d.update(overrides)
        cfg = RunConfig.from_dict(d)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_root_seed(args.seed)
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    pcfg = PretrainConfig(steps=args.steps, batch_size=args.batch_size,
                          eval_every=args.eval_every)
    pretrain_seed = int(np.random.SeedSequence([cfg.seed_corpus, 97]).generate_state(1)[0])
    corpus = synth_generate(cfg.backbone.pretrain_classes, args.samples_per_class,
                            cfg.synth, seed=pretrain_seed, id_prefix="p")
    model, report = pretrain(cfg.backbone, corpus, seed=pretrain_seed, pcfg=pcfg)
    out = _resolve_output(args.out or cfg.backbone_checkpoint)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out, {"accuracy": report.accuracy, "usable": report.usable,
                                "steps_used": report.steps_used})
    print(f"pretrained backbone -> {out}")
    print(f"held-out accuracy {report.accuracy:.4f} after {report.steps_used} steps"
          f" ({'usable' if report.usable else 'UNUSABLE'})")
    return 0 if report.usable else 1


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    import dataclasses
    synth = dataclasses.replace(cfg.synth, multi_label=args.multi_label or cfg.synth.multi_label)
    meta, samples = synth_generate(args.classes or cfg.num_classes,
                                   args.samples_per_class or cfg.samples_per_class,
                                   synth, seed=cfg.seed_corpus)
    out = _resolve_output(args.out)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, meta, samples)
    print(f"wrote {len(samples)} samples over {meta.num_classes} classes -> {out}")
    return 0


def _run_single(cfg: RunConfig) -> Report:
    report, artifacts = run_experiment(cfg)
    emit_report(report, cfg.output_dir, artifacts)
    return report


def cmd_run(args) -> int:
    cfg = _load_config(args)
    cfg = _with_output(cfg, cfg.output_dir)
    report = _run_single(cfg)
    fg = "n/a" if report.fg is None else f"{report.fg:.4f}"
    print(f"variant={cfg.variant} eta={cfg.eta} AP={report.ap:.4f} FG={fg}")
    print(f"report written to {cfg.output_dir}")
    return 0


def _with_output(cfg: RunConfig, out: str) -> RunConfig:
    import dataclasses
    return dataclasses.replace(cfg, output_dir=_resolve_output(out))


def _sweep_worker(cfg_dict: dict) -> tuple[str, float, float | None]:
    cfg = RunConfig.from_dict(cfg_dict)
    report = _run_single(cfg)
    return cfg.output_dir, report.ap, report.fg


def cmd_sweep(args) -> int:
    base = _load_config(args)
    axes: list[tuple[str, list]] = []
    for spec in args.axis:
        name, _, raw = spec.partition("=")
        if name not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")
        values = [json.loads(v) for v in raw.split(",") if v]
        if not values:
            raise ValueError(f"axis {name} has no values")
        axes.append((name, values))
    if not axes:
        raise ValueError("sweep needs at least one --axis")

    root = _resolve_output(args.out or base.output_dir)
    combos = list(itertools.product(*(vals for _, vals in axes)))
    configs = []
    for combo in combos:
        d = base.to_dict()
        tag_parts = []
        for (name, _), value in zip(axes, combo):
            d[name] = value
            tag_parts.append(f"{name}{value}")
        tag = "_".join(tag_parts)
        d["output_dir"] = str(Path(root) / tag)
        configs.append((tag, d))

    results = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for (tag, _), res in zip(configs, pool.map(_sweep_worker,
                                                       [d for _, d in configs])):
                results.append((tag, res))
    else:
        for tag, d in configs:
            results.append((tag, _sweep_worker(d)))

    summary = Path(root) / "sweep.csv"
    summary.parent.mkdir(parents=True, exist_ok=True)
    with open(summary, "w") as fh:
        fh.write("tag,ap,fg,output_dir\n")
        for tag, (out_dir, ap, fg) in results:
            fh.write(f"{tag},{ap!r},{'' if fg is None else repr(fg)},{out_dir}\n")
    for tag, (_, ap, fg) in results:
        fgs = "n/a" if fg is None else f"{fg:.4f}"
        print(f"{tag}: AP={ap:.4f} FG={fgs}")
    print(f"sweep summary -> {summary}")
    return 0


def cmd_report(args) -> int:
    with open(args.report) as fh:
        report = Report.from_dict(json.load(fh))
    ap, fg = report.recompute()
    ok = abs(ap - report.ap) <= 1e-12 and (
        (fg is None and report.fg is None) or abs(fg - report.fg) <= 1e-12)
    print(f"artifact version: {report.artifact_version}")
    print(f"variant: {report.config.get('variant')}  eta: {report.config.get('eta')}")
    fgs = "n/a" if report.fg is None else f"{report.fg:.4f}"
    print(f"AP: {report.ap:.4f}  FG: {fgs}")
    print(f"matrix check: {'consistent' if ok else 'MISMATCH'}")
    for entry in report.per_session:
        print(f"  session {entry['session']}: classes={entry['classes']} "
              f"mean loss {entry['mean_total']:.4f}")
    if args.emit:
        emit_report(report, _resolve_output(args.emit))
        print(f"re-emitted CSVs to {args.emit}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rebq",
        description="Continual missing-modality learning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (RunConfig schema)")
        p.add_argument("--seed", type=int, help="root seed deriving all seed streams")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (JSON-parsed value)")

    p = sub.add_parser("pretrain", help="pretrain and freeze a backbone checkpoint")
    common(p)
    p.add_argument("--out", help="checkpoint path (default: config backbone_checkpoint)")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--samples-per-class", type=int, default=100)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    common(p)
    p.add_argument("--out", required=True, help="corpus path (.jsonl)")
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--multi-label", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run one continual experiment")
    common(p)
    p.add_argument("--variant")
    p.add_argument("--eta", type=float)
    p.add_argument("--lam", type=float, help="reconstruction loss weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--backbone-checkpoint", dest="backbone_checkpoint")
    p.add_argument("--out", dest="output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid sweep over config axes")
    common(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2,...",
                   help=f"sweep axis; one of {', '.join(SWEEP_AXES)}")
    p.add_argument("--out", help="sweep output root")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="verify and print a saved report")
    p.add_argument("--report", required=True, help="path to report.json")
    p.add_argument("--emit", help="directory to re-emit CSVs into")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExperimentError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
