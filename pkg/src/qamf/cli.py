"""Experiment command line: gen | train | eval | quality-report.

Every command is deterministic given (config, seed, inputs) and writes the
fully resolved configuration into its output directory. Failures print one
machine-readable ERROR line to stderr and exit nonzero.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import metrics as me
from . import synthdata as sd
from . import training as tr
from .fusion import FusionModel, model_forward


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _emit_resolved(out_dir, resolved_text):
    _write(Path(out_dir) / "resolved_config.yaml", resolved_text)


def _load_model(checkpoint_path):
    """Rebuild a model from a checkpoint's embedded resolved config."""
    meta, tensors = ck.read_checkpoint(checkpoint_path)
    resolved = cf.loads_config(meta)
    model = FusionModel(cf.build_model_config(resolved))
    opt = cf.build_optimizer(resolved)
    ck.unpack_state(model, opt, tensors)
    return model, opt, resolved, meta


def cmd_gen(args):
    resolved = cf.load_config(args.config)
    if args.seed is not None:
        resolved["generator"]["seed"] = args.seed
    text = cf.canonical_text(resolved)
    dataset = sd.generate(cf.build_generator(resolved))
    dataset.config_text = text
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sd.write_dataset(out, dataset)
    _emit_resolved(out.parent, text)
    print(f"wrote {len(dataset.sets)} sample sets to {out}")
    return 0


def cmd_train(args):
    resolved = cf.load_config(args.config)
    if args.seed is not None:
        resolved["trainer"]["seed"] = args.seed
    text = cf.canonical_text(resolved)
    dataset = sd.read_dataset(args.data)

    n_classes = resolved["generator"]["n_classes"]
    start = resolved["generator"]["class_start"]
    for s in dataset.sets:
        if not (start <= s.label < start + n_classes):
            raise cf.ConfigError(
                f"dataset label {s.label} outside [{start}, {start + n_classes})")
        s.label -= start  # heads/centers are indexed from zero

    model = FusionModel(cf.build_model_config(resolved))
    opt = cf.build_optimizer(resolved)
    if args.resume:
        meta, tensors = ck.read_checkpoint(args.resume)
        ck.unpack_state(model, opt, tensors)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _emit_resolved(out_dir, text)

    def save(step, final=False):
        name = "model.qfck" if final else f"model_step{step}.qfck"
        ck.write_checkpoint(out_dir / name, text, ck.pack_state(model, opt))

    t = resolved["trainer"]
    log = tr.train(
        model, dataset, cf.build_hyperparams(resolved),
        cf.build_dropout(resolved), cf.build_schedule(resolved),
        epochs=t["epochs"], batch_size=t["batch_size"], seed=t["seed"],
        opt_state=opt, checkpoint_every=t["checkpoint_every"],
        checkpoint_hook=lambda step: save(step))
    save(opt.step, final=True)
    _write(out_dir / "train_log.csv", log.to_csv())
    print(f"trained {opt.step} steps; checkpoint at {out_dir / 'model.qfck'}")
    return 0


def _relabel(dataset, resolved):
    start = resolved["generator"]["class_start"]
    if start:
        for s in dataset.sets:
            s.label -= start
    return dataset


def _identification_report(model, dataset, ev, fusion):
    split = sd.split_identification(
        dataset, gallery_per_class=ev["gallery_per_class"], seed=ev["seed"])
    force_uniform = fusion == "avg"
    if fusion in ("quality", "avg"):
        rankings, labels = _rank_multimodal(model, split, ev, force_uniform)
    elif fusion in ("sum", "major"):
        rankings, labels = _rank_per_modality(model, split, ev, fusion)
    else:
        raise me.MetricError(f"unknown fusion '{fusion}'")
    n_classes = len({g.label for g in split.gallery})
    max_rank = ev["max_rank"] or n_classes
    return me.cmc(rankings, labels, max_rank=max_rank)


def _rank_multimodal(model, split, ev, force_uniform):
    by_class = {}
    for g in split.gallery:
        z = model_forward(model, g, force_uniform=force_uniform).z.value
        by_class.setdefault(g.label, []).append(z)
    rankings, labels = [], []
    for probe in split.probes:
        z = model_forward(model, probe, force_uniform=force_uniform).z.value
        if ev["gallery_rep"] == "mean":
            reps = {c: np.mean(zs, axis=0) for c, zs in by_class.items()}
            rankings.append(me.rank_classes(z, reps))
        else:
            best = {c: max(me.similarity(z, g) for g in zs)
                    for c, zs in by_class.items()}
            rankings.append([c for _, c in sorted((-v, c)
                                                  for c, v in best.items())])
        labels.append(probe.label)
    return rankings, labels


def _rank_per_modality(model, split, ev, fusion):
    k = model.n_modalities
    by_class = {}
    for g in split.gallery:
        out = model_forward(model, g)
        by_class.setdefault(g.label, []).append([y.value for y in out.y])
    reps = {c: [np.mean([y[m] for y in ys], axis=0) for m in range(k)]
            for c, ys in by_class.items()}
    rankings, labels = [], []
    for probe in split.probes:
        out = model_forward(model, probe)
        ys = [y.value for y in out.y]
        sims = {c: [me.similarity(ys[m], rep[m]) for m in range(k)]
                for c, rep in reps.items()}
        if fusion == "sum":
            fused = {c: float(np.mean(s)) for c, s in sims.items()}
            rankings.append([c for _, c in sorted((-v, c)
                                                  for c, v in fused.items())])
        else:  # major: per-modality votes, then mean similarity as tiebreak
            votes = {c: 0 for c in sims}
            for m in range(k):
                winner = min(sims, key=lambda c: (-sims[c][m], c))
                votes[winner] += 1
            order = sorted(sims, key=lambda c: (-votes[c],
                                                -float(np.mean(sims[c])), c))
            rankings.append(order)
        labels.append(probe.label)
    return rankings, labels


def _quality_rows(model, dataset):
    rows = []
    for si, sset in enumerate(dataset.sets):
        out = model_forward(model, sset)
        for m in range(sset.n_modalities):
            w = out.intra_weights[m].value
            raw = out.intra_raw[m].value
            g = sset.gammas[m]
            for i in range(len(w)):
                rows.append({
                    "set": si, "label": sset.label, "modality": m,
                    "sample": i, "p": len(w), "gamma": float(g[i]),
                    "gt_quality": 1.0 - float(g[i]),
                    "raw_score": float(raw[i]), "weight": float(w[i]),
                })
    return rows


def cmd_eval(args):
    model, _, resolved, meta = _load_model(args.model)
    dataset = _relabel(sd.read_dataset(args.data), resolved)
    ev = resolved["eval"]
    protocol = args.protocol or ev["protocol"]
    out_dir = Path(args.report)
    out_dir.mkdir(parents=True, exist_ok=True)
    _emit_resolved(out_dir, meta)

    outputs = me.embed_sets(model, dataset.sets)
    p_b = me.quality_expectation(outputs)
    rows = _quality_rows(model, dataset)
    try:
        spearman = me.quality_correlation([r["weight"] for r in rows],
                                          [r["gt_quality"] for r in rows])
    except me.MetricError:
        spearman = None

    report = me.EvalReport(p_b=list(p_b), spearman_quality=spearman)
    if protocol == "verification":
        split = sd.split_verification(
            dataset, pairs=ev["pairs"],
            positive_fraction=ev["positive_fraction"], seed=ev["seed"])
        genuine, impostor = me.verification_scores(model, split.pairs,
                                                   fusion=args.fusion)
        roc = me.roc_metrics(genuine, impostor)
        report.auc, report.eer = roc.auc, roc.eer
        report.tar_at, report.roc = roc.tar_at, roc.roc
        _write(out_dir / "roc.csv", report.roc_csv())
    elif protocol == "identification":
        report.cmc = _identification_report(model, dataset, ev, args.fusion)
        _write(out_dir / "cmc.csv", report.cmc_csv())
    else:
        raise cf.ConfigError(f"unknown protocol '{protocol}'")
    _write(out_dir / "report.json", report.to_json() + "\n")
    print(f"report written to {out_dir / 'report.json'}")
    return 0


def cmd_quality_report(args):
    model, _, resolved, meta = _load_model(args.model)
    dataset = _relabel(sd.read_dataset(args.data), resolved)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _emit_resolved(out_dir, meta)

    rows = _quality_rows(model, dataset)
    header = ["set", "label", "modality", "sample", "p", "gamma",
              "gt_quality", "raw_score", "weight"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float)
                              else str(r[c]) for c in header))
    _write(out_dir / "quality_table.csv", "\n".join(lines) + "\n")

    summary = {"n_samples": len(rows)}
    weights = [r["weight"] for r in rows]
    truths = [r["gt_quality"] for r in rows]
    try:
        summary["spearman_quality"] = me.quality_correlation(weights, truths)
    except me.MetricError as e:
        summary["spearman_quality"] = None
        summary["note"] = f"undefined: {e}"
    k = model.n_modalities
    per_mod = {}
    for m in range(k):
        sub = [r for r in rows if r["modality"] == m]
        try:
            per_mod[str(m)] = me.quality_correlation(
                [r["weight"] for r in sub], [r["gt_quality"] for r in sub])
        except me.MetricError:
            per_mod[str(m)] = None
    summary["spearman_per_modality"] = per_mod
    _write(out_dir / "quality_summary.json",
           json.dumps(summary, indent=2, sort_keys=True) + "\n")

    # estimated score distribution per ground-truth-quality quintile
    hist = ["modality,gt_lo,gt_hi,n,mean_weight,mean_raw"]
    edges = np.linspace(0.0, 1.0, 6)
    for m in range(k):
        sub = [r for r in rows if r["modality"] == m]
        for lo, hi in zip(edges[:-1], edges[1:]):
            bucket = [r for r in sub
                      if lo <= r["gt_quality"] < hi
                      or (hi == 1.0 and r["gt_quality"] == 1.0)]
            if bucket:
                mw = float(np.mean([r["weight"] for r in bucket]))
                mr = float(np.mean([r["raw_score"] for r in bucket]))
                hist.append(f"{m},{lo!r},{hi!r},{len(bucket)},{mw!r},{mr!r}")
            else:
                hist.append(f"{m},{lo!r},{hi!r},0,,")
    _write(out_dir / "quality_hist.csv", "\n".join(hist) + "\n")
    print(f"quality report written to {out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qamf",
        description="Quality-aware multimodal fusion experiments on "
                    "synthetic identity data.",
        epilog="Config file: YAML with sections generator/model/hyperparams/"
               "dropout/trainer/schedule/eval. Unknown keys are rejected. "
               "Run with --defaults to print all defaults with docs.",
    )
    parser.add_argument("--defaults", action="store_true",
                        help="print the fully resolved default config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a synthetic dataset (QADS file)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=None,
                   help="override generator.seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a fusion model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="QADS dataset path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override trainer.seed")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="QFCK checkpoint path")
    p.add_argument("--data", required=True, help="QADS dataset path")
    p.add_argument("--protocol", default=None,
                   choices=["verification", "identification"])
    p.add_argument("--fusion", default="quality",
                   choices=["quality", "avg", "sum", "major"])
    p.add_argument("--report", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quality-report",
                       help="per-sample estimated quality vs ground truth")
    p.add_argument("--model", required=True, help="QFCK checkpoint path")
    p.add_argument("--data", required=True, help="QADS dataset path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_quality_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.defaults:
        print(cf.defaults_text())
        for key in sorted(cf.FIELD_DOCS):
            print(f"# {key}: {cf.FIELD_DOCS[key]}")
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except Exception as e:  # one machine-readable line, nonzero exit
        line = json.dumps({"error": type(e).__name__, "message": str(e)})
        print(f"ERROR {line}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
