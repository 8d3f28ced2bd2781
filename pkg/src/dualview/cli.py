"""Command-line surface: data generation, training, evaluation, export.

Exit codes: 0 success, 1 domain error (bad data, mismatched checkpoint,
missing sample, failed check), 2 usage error. Diagnostics go to stderr;
result values and output paths go to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .enhance import write_pgm
from .metrics import auc, evaluate, export_roc, report_to_json, roc_points
from .model import AblationFlags
from .synthdata import generate_dataset, load_manifest
from .training import (TrainConfig, load_checkpoint, load_train_config,
                       restore_model, score_rows, train, train_config_from_dict,
                       tune_allocator)
from .verification import run_gradient_suite


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _info(msg):
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualview",
        description="two-view domain-generalization classifier toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--per-domain", type=int, default=400)
    p.add_argument("--malignant-frac", type=float, default=0.5)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--unseen", type=int, default=1,
                   help="number of trailing domains held out as unseen")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config; keys match TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-lr", type=float, dest="base_lr")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--selection", choices=["unseen", "seen-holdout"])
    p.add_argument("--arm", help="ablation arm (baseline, cve, cve+ms, ..., full)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--domains", choices=["all", "seen", "unseen"], default="all")
    p.add_argument("--report", help="write MetricsReport JSON here")
    p.add_argument("--roc", help="write ROC CSV here (plus a PNG figure)")

    p = sub.add_parser("gradcheck", help="run the gradient-integrity suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-elements", type=int, default=80)

    p = sub.add_parser("ablate", help="train ablation arms and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arms", default="baseline,cve,ms,ge,full",
                   help="comma-separated arm specs")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--seeds", help="comma-separated seed list (overrides --seed)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--base-lr", type=float, dest="base_lr", default=None)
    p.add_argument("--config", help="base JSON config for every arm")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("export-attention", help="export enhancement heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True, help="sample id from the manifest")
    p.add_argument("--out", required=True)
    return parser


def _base_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        config = load_train_config(args.config)
    else:
        config = TrainConfig()
    overrides = {}
    for key in ("epochs", "seed", "base_lr", "batch_size", "selection"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        data = train_config_from_dict({**_config_dict(config), **overrides})
        return data
    return config


def _config_dict(config: TrainConfig) -> dict:
    from dataclasses import asdict
    data = asdict(config)
    for key in ("adam_betas", "ensemble_weights", "stage_channels"):
        data[key] = list(data[key])
    return data


def _apply_arm(config: TrainConfig, arm: str) -> TrainConfig:
    flags = AblationFlags.from_arm(arm)
    data = _config_dict(config)
    data.update(use_cve=flags.use_cve, use_mixstyle_stages=flags.use_mixstyle_stages,
                use_global_encoder=flags.use_global_encoder, use_micl=flags.use_micl)
    return train_config_from_dict(data)


def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.domains, args.per_domain, args.malignant_frac,
                                args.size, args.seed, args.out,
                                unseen_count=args.unseen)
    print(os.path.join(args.out, "manifest.csv"))
    _info(f"wrote {len(manifest.rows)} samples over {args.domains} domains "
          f"(seen {manifest.seen_domains}, unseen {manifest.unseen_domains})")
    return 0


def _infer_input_size(manifest) -> int:
    cc, _ = manifest.load_pair(manifest.rows[0])
    return int(cc.shape[-1])


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    config = _base_config(args)
    if not args.config:
        size = _infer_input_size(manifest)
        if size != config.input_size:
            config = train_config_from_dict({**_config_dict(config),
                                             "input_size": size})
    if args.arm:
        config = _apply_arm(config, args.arm)
    log = None if args.quiet else _info
    result = train(config, manifest, args.out, log=log)
    from .plots import training_curves
    if result.history:
        training_curves(result.history, os.path.join(args.out, "history.png"))
        _write_history_csv(result.history, os.path.join(args.out, "history.csv"))
    print(result.best_path)
    _info(f"best epoch {result.best_epoch} selection AUC {result.best_selection_auc:.4f}"
          + (" (diverged; last good checkpoint kept)" if result.diverged else ""))
    return 0


def _write_history_csv(history, path):
    keys = ["epoch", "lr", "mean_loss", "selection_auc",
            "seen_test_auc", "unseen_test_auc", "seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for entry in history:
            writer.writerow([entry.get(k) for k in keys])


def _domain_subset(manifest, which):
    if which == "seen":
        return manifest.seen_domains
    if which == "unseen":
        return manifest.unseen_domains
    return None


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    rows = manifest.select(split=args.split,
                           domains=_domain_subset(manifest, args.domains))
    if not rows:
        raise ValueError(f"no rows for split={args.split} domains={args.domains}")
    records = score_rows(model, manifest, rows)
    report = evaluate(records, domains=sorted({r.domain_id for r in records}))
    text = report_to_json(report)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
        print(args.report)
    if args.roc:
        export_roc(records, args.roc)
        print(args.roc)
        from .plots import roc_figure
        png = os.path.splitext(args.roc)[0] + ".png"
        roc_figure(roc_points(records), report["overall"]["auc"], png,
                   title=f"{args.domains} domains, {args.split} split")
        print(png)
    overall = report["overall"]
    _info(f"overall: auc={overall['auc']:.4f} tpr={overall['tpr']:.4f} "
          f"tnr={overall['tnr']:.4f} acc={overall['acc']:.4f}")
    if not args.report and not args.roc:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seed=args.seed, max_elements=args.max_elements,
                                 log=lambda msg: print(msg))
    return 0 if all(passed for _, _, passed in results) else 1


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.data)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    if not arms:
        raise ValueError("no ablation arms given")
    seeds = ([int(s) for s in args.seeds.split(",")]
             if args.seeds else [args.seed])
    base = _base_config(args)
    if not args.config:
        size = _infer_input_size(manifest)
        if size != base.input_size:
            base = train_config_from_dict({**_config_dict(base), "input_size": size})
    log = None if args.quiet else _info

    results = {arm: [] for arm in arms}
    for seed in seeds:
        for arm in arms:
            data = _config_dict(_apply_arm(base, arm))
            data["seed"] = seed
            config = train_config_from_dict(data)
            out_dir = os.path.join(args.out, f"{arm.replace('+', '_')}_s{seed}")
            if log:
                log(f"=== arm {arm} seed {seed} ===")
            res = train(config, manifest, out_dir, log=log)
            ckpt = load_checkpoint(res.best_path)
            results[arm].append({
                "seed": seed,
                "selection_auc": res.best_selection_auc,
                "best_epoch": res.best_epoch,
                "report": ckpt.metrics["report"],
            })

    table_path = os.path.join(args.out, "ablation.csv")
    os.makedirs(args.out, exist_ok=True)
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "seed", "unseen_auc", "best_epoch"])
        for arm in arms:
            for entry in results[arm]:
                writer.writerow([arm, entry["seed"],
                                 f"{entry['selection_auc']:.6f}", entry["best_epoch"]])
    means = {arm: float(np.mean([e["selection_auc"] for e in results[arm]]))
             for arm in arms}
    from .plots import ablation_figure
    ablation_figure(arms, [means[a] for a in arms],
                    os.path.join(args.out, "ablation.png"))

    print("arm,mean_unseen_auc," + ",".join(f"seed{s}" for s in seeds))
    for arm in arms:
        per_seed = ",".join(f"{e['selection_auc']:.4f}" for e in results[arm])
        print(f"{arm},{means[arm]:.4f},{per_seed}")
    print(table_path)
    return 0


def cmd_export_attention(args) -> int:
    manifest = load_manifest(args.data)
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    rows = [r for r in manifest.rows if r.sample_id == args.sample]
    if not rows:
        raise ValueError(f"sample id {args.sample!r} not found in manifest")
    row = rows[0]
    cc, mlo = manifest.load_pair(row)
    heat_cc, heat_mlo, v_cc, v_mlo = model.stage3_attention(cc[None], mlo[None])
    os.makedirs(args.out, exist_ok=True)

    outputs = []
    from .plots import attention_figure
    for view, image, heat in (("cc", cc, heat_cc), ("mlo", mlo, heat_mlo)):
        pgm_path = os.path.join(args.out, f"{row.sample_id}_{view}.pgm")
        write_pgm(heat[0, 0], pgm_path)
        outputs.append(pgm_path)
        png_path = os.path.join(args.out, f"{row.sample_id}_{view}.png")
        attention_figure(image[0], heat[0, 0], png_path,
                         title=f"{view} attention (label={row.label})")
        outputs.append(png_path)
    vec_path = os.path.join(args.out, f"{row.sample_id}_vectors.csv")
    with open(vec_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "column", "value"])
        for view, vec in (("cc", v_cc[0]), ("mlo", v_mlo[0])):
            for k, val in enumerate(vec):
                writer.writerow([view, k, f"{val:.8f}"])
    outputs.append(vec_path)
    for path in outputs:
        print(path)
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-attention": cmd_export_attention,
}


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tune_allocator()
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, KeyError, OSError) as exc:
        _err(str(exc))
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
