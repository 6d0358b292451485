"""Command line interface.

Commands: synth, train-source, adapt, eval, pseudo-labels show, report.
Output directories default to --out, falling back to the UDALM_OUT
environment variable, then the current directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluation
from .adaptation import read_pseudo_labels, selected_counts
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, save_config
from .data import load_dataset
from .errors import UdalmError
from .synth import ShiftParams, SynthSpec, synth_generate
from .trainer import predict_dataset, run_adaptation, train_supervised


def _out_dir(args, default_name):
    root = args.out or os.environ.get("UDALM_OUT") or "."
    path = root if args.out else os.path.join(root, default_name)
    os.makedirs(path, exist_ok=True)
    return path


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def cmd_synth(args):
    shift = ShiftParams()
    if args.no_shift:
        shift = ShiftParams(contrast=1.0, gamma=1.0, brightness=0.0,
                            noise=0.0, shape_scale=0.0)
    spec = SynthSpec(
        seed=args.seed if args.seed is not None else 0,
        n_source=args.n_source, n_target=args.n_target, n_test=args.n_test,
        num_landmarks=args.num_landmarks, size=args.size, shift=shift,
    )
    out = _out_dir(args, "synth_data")
    paths = synth_generate(out, spec)
    print(f"wrote synthetic benchmark to {out}")
    for name, path in paths.items():
        print(f"  {name}: {path}")


def cmd_train_source(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "train_source")
    manifest = args.manifest or cfg.data.source_manifest
    samples = load_dataset(manifest, cfg.model.num_landmarks)
    model = train_supervised(samples, cfg, epochs=args.epochs, progress=print)
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, model, cfg, 0)
    save_config(cfg, os.path.join(out, "config.yaml"))
    print(f"checkpoint written to {ckpt}")


def cmd_adapt(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "adapt")
    source = load_dataset(cfg.data.source_manifest, cfg.model.num_landmarks)
    target = load_dataset(cfg.data.target_manifest) if cfg.data.target_manifest else []
    init_state = None
    if args.init_checkpoint:
        init_model, _, _, _, _ = load_checkpoint(args.init_checkpoint)
        init_state = init_model.state_dict()
    result = run_adaptation(source, target, cfg, out,
                            stop_after_round=args.rounds,
                            init_model_state=init_state, progress=print)
    save_config(cfg, os.path.join(out, "config.yaml"))
    print(f"finished; checkpoints: {len(result.checkpoint_paths)}, "
          f"pseudo-label files: {len(result.pseudo_label_paths)}")


def cmd_eval(args):
    model, _, cfg, _, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.manifest, cfg.model.num_landmarks)
    if any(s.landmarks is None for s in samples):
        raise UdalmError("evaluation manifest must carry landmarks")
    radii = tuple(args.radii) if args.radii else cfg.eval.radii_mm
    coords, _ = predict_dataset(model, samples, cfg.optimizer.batch_size)
    report = evaluation.subdomain_report(samples, coords, radii,
                                         cfg.eval.mre_average)
    out = _out_dir(args, "eval")
    name = args.name or os.path.splitext(os.path.basename(args.checkpoint))[0]
    evaluation.save_report(report, os.path.join(out, f"eval_{name}.json"))
    table = evaluation.format_table({name: report}, radii)
    with open(os.path.join(out, f"eval_{name}.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    if report.per_subdomain:
        sub = evaluation.format_table(report.per_subdomain, radii)
        print("\nper subdomain:\n" + sub)


def cmd_pseudo_labels_show(args):
    records, state = read_pseudo_labels(args.file)
    print(f"round {state.round}  ratio "
          f"{'n/a' if state.ratio != state.ratio else f'{state.ratio:.2f}'}  "
          f"records {len(records)}")
    print("thresholds: " + " ".join(f"{t:.4f}" for t in state.thresholds))
    if records[0].mask is not None:
        counts = selected_counts(records)
        print("selected per landmark: " + " ".join(str(int(c)) for c in counts))
    if args.verbose:
        for rec in records:
            sel = "".join(str(int(m)) for m in rec.mask) if rec.mask is not None else "?"
            conf = " ".join(f"{c:.3f}" for c in rec.confidences)
            print(f"  {rec.image_id} mask={sel} conf=[{conf}]")


def cmd_report(args):
    run_dir = args.run_dir
    out = _out_dir(args, "report")
    reports = {}
    for path in sorted([p for p in os.listdir(run_dir) if p.startswith("eval_")
                        and p.endswith(".json")]):
        name = path[len("eval_"):-len(".json")]
        reports[name] = evaluation.load_report(os.path.join(run_dir, path))
    if reports:
        radii = sorted(next(iter(reports.values())).sdr)
        table = evaluation.format_table(reports, radii)
        with open(os.path.join(out, "summary.txt"), "w") as fh:
            fh.write(table + "\n")
        print(table)
        for name, rep in reports.items():
            if rep.per_subdomain:
                evaluation.save_subdomain_plot(
                    rep, os.path.join(out, f"subdomain_{name}.png"),
                    title=f"MRE by subdomain: {name}")
    else:
        print(f"no eval_*.json reports found in {run_dir}")

    if args.histogram:
        a_path, b_path = args.histogram
        a = load_dataset(a_path)
        b = load_dataset(b_path)
        hist = evaluation.histogram_report(a, b)
        evaluation.save_histogram_artifacts(hist, os.path.join(out, "histogram"))
        print(f"histogram means: {hist.labels[0]}={hist.mean_a:.4f} "
              f"{hist.labels[1]}={hist.mean_b:.4f}")

    pl_dir = os.path.join(run_dir, "pseudo_labels")
    if os.path.isdir(pl_dir):
        rows = []
        for path in sorted(os.listdir(pl_dir)):
            records, state = read_pseudo_labels(os.path.join(pl_dir, path))
            counts = selected_counts(records) if records[0].mask is not None else None
            rows.append({"round": state.round, "ratio": state.ratio,
                         "thresholds": state.thresholds.tolist(),
                         "selected": None if counts is None else counts.tolist()})
        with open(os.path.join(out, "pseudo_label_rounds.json"), "w") as fh:
            json.dump(rows, fh, indent=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="udalm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", default=None, help="output directory "
                       "(default: $UDALM_OUT or cwd)")

    p = sub.add_parser("synth", help="generate the synthetic domain-shift benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--n-source", type=int, default=40)
    p.add_argument("--n-target", type=int, default=120)
    p.add_argument("--n-test", type=int, default=60)
    p.add_argument("--num-landmarks", type=int, default=6)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--no-shift", action="store_true",
                   help="disable the target-domain shift")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-source", help="supervised training on one manifest")
    common(p)
    p.add_argument("--manifest", default=None,
                   help="override data.source_manifest from the config")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run the round-based adaptation schedule")
    common(p)
    p.add_argument("--init-checkpoint", default=None,
                   help="use these weights as the round-0 model")
    p.add_argument("--rounds", type=int, default=None,
                   help="stop after this self-training round (resumable)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--radii", type=float, nargs="+", default=None)
    p.add_argument("--name", default=None, help="report name (default: checkpoint stem)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudo-labels", help="inspect pseudo-label files")
    pls = p.add_subparsers(dest="pl_command", required=True)
    ps = pls.add_parser("show")
    ps.add_argument("file")
    ps.add_argument("--verbose", action="store_true")
    ps.set_defaults(func=cmd_pseudo_labels_show)

    p = sub.add_parser("report", help="collect eval reports and plots from a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--histogram", nargs=2, metavar=("MANIFEST_A", "MANIFEST_B"),
                   default=None, help="also write an intensity histogram comparison")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UdalmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
