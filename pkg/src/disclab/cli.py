"""Command-line entry point.

Subcommands:
  synth           generate a synthetic candidate dataset (train/val/test
                  JSONL splits + manifest)
  train           train the one-pass refinement network on a dataset
  eval            evaluate selectors on the test split (CSV or JSON)
  bench           inference-cost benchmark across FP counts
  attention-demo  run the shape-attention block on a synthetic image and
                  report gate statistics and gradient-check results

Every artifact embeds the seed and the effective configuration (dataset
manifests, checkpoint descriptors, '#'-prefixed metadata lines in CSVs), so
any output can be regenerated from its own metadata. Reruns with the same
seed produce byte-identical files, except for wall-time measurements in
bench output, which are physical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, baselines, heatmap, lookonce, numkit, shape_attention, synthbench
from .synthbench import MetricReport, SynthConfig

# Preset geometry uses tight template adherence (gap jitter / TP noise 1 mm)
# so the exhaustive selector is near-exact: the 6 mm FP exclusion ring then
# covers the region where an injected FP could out-fit a true candidate.
PRESETS = {
    # 100 cases, 11 true + 20 injected false candidates per case
    "appendix-t2": {"cases": 100, "fp_count": 20, "gap_jitter": 1.0, "tp_noise": 1.0},
    # noisy-prediction demo protocol: 10 injected false candidates
    "noisy-fig4b": {"cases": 100, "fp_count": 10, "gap_jitter": 1.0, "tp_noise": 1.0},
}


class CliError(RuntimeError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (recorded in outputs)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="tabular output format")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for generation")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="disclab", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"disclab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic candidate dataset")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--cases", type=int, default=None, help="number of cases (default 100)")
    p.add_argument("--v", type=int, default=11, help="number of discs per case")
    p.add_argument("--fp-count", type=int, default=None, help="false positives per case")
    p.add_argument("--mean-gap", type=float, default=35.0, help="mean disc gap, mm")
    p.add_argument("--gap-jitter", type=float, default=None, help="gap jitter sigma, mm (default 4)")
    p.add_argument("--lateral-jitter", type=float, default=3.0, help="column jitter sigma, mm")
    p.add_argument("--tp-noise", type=float, default=None, help="true-candidate noise sigma, mm (default 2)")
    p.add_argument("--fp-min-dist", type=float, default=6.0, help="min FP distance to any TP, mm")
    p.add_argument("--drop-tp", type=float, default=0.0, help="probability of dropping a TP")

    p = sub.add_parser("train", help="train the refinement network")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from `synth`")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("eval", help="evaluate selectors on the test split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from `synth`")
    p.add_argument("--checkpoint", type=Path, default=None, help="trained model (for lookonce)")
    p.add_argument("--methods", default="lookonce,search-tree,condition",
                   help="comma list of lookonce,search-tree,condition,perfect")
    p.add_argument("--threshold", type=float, default=0.5, help="keep threshold when N unknown")

    p = sub.add_parser("bench", help="inference-cost benchmark")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fp-counts", default="1,2,3,4,5,6,7,8", help="comma list of extra FP counts")
    p.add_argument("--repeats", type=int, default=7, help="timed repetitions per point (>=5)")
    p.add_argument("--methods", default="lookonce,search-tree")

    p = sub.add_parser("attention-demo", help="run the shape-attention block standalone")
    _add_common(p)
    p.add_argument("--image", choices=("synthetic", "constant"), default="synthetic")
    p.add_argument("--size", type=int, default=24, help="demo image side, pixels")
    p.add_argument("--levels", type=int, default=3, help="pyramid levels (1..4)")
    p.add_argument("--grad-check", action="store_true", default=True)
    p.add_argument("--no-grad-check", dest="grad_check", action="store_false")
    return ap


def _write_rows(path: Path, header: list[str], rows: list[list], meta: dict, fmt: str) -> None:
    """Write rows as CSV with '#' metadata lines, or as a JSON document."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        doc = {"meta": meta, "rows": [dict(zip(header, r)) for r in rows]}
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        return
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}={json.dumps(meta[k], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _machine_meta(seed: int) -> dict:
    return {
        "seed": seed,
        "machine": platform.machine(),
        "python": platform.python_version(),
        "disclab": __version__,
    }


def _fmt(x) -> str | float | int:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6g}"
    return x


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cases = args.cases
    fp_count = args.fp_count
    gap_jitter = args.gap_jitter
    tp_noise = args.tp_noise
    if args.preset:
        preset = PRESETS[args.preset]
        cases = preset["cases"] if cases is None else cases
        fp_count = preset["fp_count"] if fp_count is None else fp_count
        gap_jitter = preset["gap_jitter"] if gap_jitter is None else gap_jitter
        tp_noise = preset["tp_noise"] if tp_noise is None else tp_noise
    cases = 100 if cases is None else cases
    fp_count = 10 if fp_count is None else fp_count
    cfg = SynthConfig(
        v=args.v, mean_gap_mm=args.mean_gap,
        gap_jitter_mm=4.0 if gap_jitter is None else gap_jitter,
        lateral_jitter_mm=args.lateral_jitter,
        tp_noise_mm=2.0 if tp_noise is None else tp_noise,
        fp_count=fp_count, fp_min_dist_mm=args.fp_min_dist,
        drop_tp_probability=args.drop_tp, seed=args.seed,
    )
    data = synthbench.generate_dataset(cfg, cases, jobs=args.jobs)
    train, val, test = synthbench.split_dataset(data)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        synthbench.write_cases(part, out / f"{name}.jsonl", cfg.v)
    manifest = {
        "config": asdict(cfg),
        "preset": args.preset,
        "cases": cases,
        "splits": {"train": len(train), "val": len(val), "test": len(test)},
        "seed": args.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(f"wrote {cases} cases ({len(train)}/{len(val)}/{len(test)} train/val/test) to {out}")
    return 0


def _load_split(data_dir: Path, name: str):
    path = data_dir / f"{name}.jsonl"
    if not path.exists():
        raise CliError(f"missing dataset split {path}")
    return synthbench.read_cases(path)


def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise CliError(f"missing dataset manifest {path}")
    return json.loads(path.read_text())


def cmd_train(args) -> int:
    train = _load_split(args.data, "train")
    val = _load_split(args.data, "val")
    manifest = _load_manifest(args.data)
    config = lookonce.TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed,
    )
    model, log = lookonce.train_lookonce(train, val, config)
    model.meta["train_config"] = asdict(config)
    model.meta["dataset_config"] = manifest["config"]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    lookonce.save_model(model, ckpt)
    _write_rows(
        out / "training_log.csv",
        ["epoch", "train_loss", "val_loss", "val_f1"],
        [[e.epoch, _fmt(e.train_loss), _fmt(e.val_loss), _fmt(e.val_f1)] for e in log],
        {**_machine_meta(args.seed), "config": asdict(config)},
        "csv",
    )
    print(f"best val F1 {model.meta['best_val_f1']:.4f} at epoch {model.meta['best_epoch']}; "
          f"checkpoint {ckpt}")
    return 0


def _selection_scores(method: str, case, model, template, n, threshold):
    """Per-candidate (scores, decisions) for one case under one method."""
    if method == "lookonce":
        probs = lookonce.score_candidates(case, model)
        order = sorted(range(len(case)), key=lambda i: (-probs[i], i))
        keep = np.zeros(len(case), dtype=bool)
        if n is not None:
            keep[order[:n]] = True
        else:
            keep = probs > threshold
        return probs, keep
    if method == "search-tree":
        result, _ = baselines.search_tree_select(case, template, n)
    elif method == "condition":
        result = baselines.condition_filter(case, template)
    elif method == "perfect":
        flags = case.flags()
        return flags.astype(float), flags.copy()
    else:
        raise CliError(f"unknown eval method {method!r}")
    kept_ids = {id(c) for c, _, _ in result.kept}
    keep = np.array([id(p) in kept_ids for p in case.points], dtype=bool)
    return keep.astype(float), keep


def evaluate_methods(methods, test, model, template, threshold=0.5) -> dict[str, MetricReport]:
    """Candidate-classification + point-matching metrics per method, pooled
    over the test cases (top-N protocol with N = each case's TP count)."""
    reports: dict[str, MetricReport] = {}
    for method in methods:
        all_scores, all_flags, all_keep = [], [], []
        pairs, n_pred, n_gt = [], 0, 0
        for case in test:
            n = case.tp_count()
            scores, keep = _selection_scores(method, case, model, template, n, threshold)
            flags = case.flags()
            all_scores.append(scores)
            all_flags.append(flags)
            all_keep.append(keep)
            gt_pos = [p.position for p, f in zip(case.points, flags) if f]
            pred_pos = [p.position for p, k in zip(case.points, keep) if k]
            m = synthbench.match_and_rate(pred_pos, gt_pos)
            pairs.extend(m.pairs)
            n_pred += m.n_pred
            n_gt += m.n_gt
        report = synthbench.classification_metrics(
            np.concatenate(all_scores), np.concatenate(all_flags),
            threshold=threshold, decisions=np.concatenate(all_keep),
        )
        n_matched = len(pairs)
        report.fnr_pct = 100.0 * (n_gt - n_matched) / n_gt if n_gt else 0.0
        report.fpr_pct = 100.0 * (n_pred - n_matched) / n_pred if n_pred else 0.0
        if pairs:
            report.dtt_mean_mm, report.dtt_std_mm = synthbench.dtt(pairs)
        reports[method] = report
    return reports


_EVAL_HEADER = [
    "method", "tp", "fp", "fn", "tn", "f1", "accuracy", "sensitivity", "specificity",
    "auc", "dtt_mean_mm", "dtt_std_mm", "fnr_pct", "fpr_pct",
]


def eval_report_rows(reports: dict[str, MetricReport]) -> list[list]:
    rows = []
    for method, r in reports.items():
        rows.append([
            method, r.tp, r.fp, r.fn, r.tn, _fmt(r.f1), _fmt(r.accuracy),
            _fmt(r.sensitivity), _fmt(r.specificity), _fmt(r.auc),
            _fmt(r.dtt_mean_mm), _fmt(r.dtt_std_mm), _fmt(r.fnr_pct), _fmt(r.fpr_pct),
        ])
    return rows


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    test = _load_split(args.data, "test")
    manifest = _load_manifest(args.data)
    cfg = SynthConfig(**manifest["config"])
    model = None
    if "lookonce" in methods:
        if args.checkpoint is None:
            raise CliError("method 'lookonce' needs --checkpoint")
        if not args.checkpoint.exists():
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        model = lookonce.load_model(args.checkpoint)
    reports = evaluate_methods(methods, test, model, cfg.template(), threshold=args.threshold)
    ext = "json" if args.format == "json" else "csv"
    out_path = args.out / f"eval.{ext}"
    meta = {**_machine_meta(args.seed), "dataset_config": manifest["config"],
            "methods": methods, "threshold": args.threshold, "test_cases": len(test)}
    _write_rows(out_path, _EVAL_HEADER, eval_report_rows(reports), meta, args.format)
    for method, r in reports.items():
        auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
        print(f"{method}: F1 {r.f1:.4f} acc {r.accuracy:.4f} auc {auc} "
              f"fnr {r.fnr_pct:.2f}% fpr {r.fpr_pct:.2f}%")
    print(f"wrote {out_path}")
    return 0


def cmd_bench(args) -> int:
    if not args.checkpoint.exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model = lookonce.load_model(args.checkpoint)
    fp_counts = [int(x) for x in args.fp_counts.split(",") if x.strip()]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows = synthbench.bench_inference(
        model, fp_counts, methods=methods, repeats=args.repeats, seed=args.seed,
    )
    ext = "json" if args.format == "json" else "csv"
    out_path = args.out / f"bench.{ext}"
    meta = {**_machine_meta(args.seed), "fp_counts": fp_counts, "methods": methods,
            "repeats": args.repeats}
    _write_rows(
        out_path,
        ["method", "extra_fp", "M", "N", "operations", "wall_time_ms"],
        [[r.method, r.extra_fp, r.m, r.n, r.operations, _fmt(r.wall_time_ms)] for r in rows],
        meta, args.format,
    )
    print(f"wrote {out_path}")
    return 0


def _demo_image(kind: str, size: int) -> np.ndarray:
    if kind == "constant":
        return np.full((size, size), 0.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = cy = (size - 1) / 2.0
    ellipse = ((xx - cx) / (0.35 * size)) ** 2 + ((yy - cy) / (0.22 * size)) ** 2 <= 1.0
    img = 0.2 + 0.6 * ellipse.astype(np.float64)
    img[:, : size // 5] += 0.15  # lateral band for an extra edge
    return img


def cmd_attention_demo(args) -> int:
    if not 1 <= args.levels <= 4:
        raise CliError("--levels must be in 1..4")
    rng = np.random.default_rng(args.seed)
    size = args.size
    image = _demo_image(args.image, size)
    sf = shape_attention.compute_shape_feature(image)
    levels, channels = [], []
    for j in range(args.levels):
        c = 4 * (j + 1)
        h = max(2, size // (2**j))
        levels.append(rng.standard_normal((c, h, h)))
        channels.append(c)
    pyramid = shape_attention.FeaturePyramid(levels=levels)
    params = shape_attention.AttentionParams(channels, out_channels=4, rng=rng)
    recal, fused = shape_attention.run_block(pyramid, sf, params)

    level_stats = []
    for j, (lvl_in, lvl_out) in enumerate(zip(pyramid.levels, recal)):
        gates = shape_attention.channel_gates(lvl_in, params, j).value.ravel()
        level_stats.append({
            "level": j,
            "shape_in": list(lvl_in.shape),
            "shape_out": list(lvl_out.value.shape),
            "shape_preserved": list(lvl_in.shape) == list(lvl_out.value.shape),
            "channel_gate_min": float(gates.min()),
            "channel_gate_max": float(gates.max()),
            "channel_gate_mean": float(gates.mean()),
        })
    report = {
        "seed": args.seed,
        "image": args.image,
        "size": size,
        "levels": args.levels,
        "shape_feature": {
            "max_abs_gx": float(np.abs(sf.gx).max()),
            "max_abs_gy": float(np.abs(sf.gy).max()),
            "all_zero": bool(np.all(sf.magnitude == 0.0)),
        },
        "shape_gate": float(shape_attention.shape_gate(sf, params).value),
        "level_stats": level_stats,
        "aggregate": {
            "shape": list(fused.value.shape),
            "matches_finest_level": list(fused.value.shape[1:]) == list(pyramid.levels[0].shape[1:]),
            "min": float(fused.value.min()),
            "max": float(fused.value.max()),
        },
    }
    if args.grad_check:
        check_store = numkit.ParamStore()
        p_vars = [check_store.add(f"input.P{j}", lvl) for j, lvl in enumerate(pyramid.levels)]
        sf_var = check_store.add("input.sf", sf.stack())
        for name, p in params.store.items():
            check_store.add(name, p.value)
        view = params.with_store(check_store)

        def loss():
            recal_v = [
                shape_attention.recalibrate_level(p_vars[j], sf_var, view, j)
                for j in range(args.levels)
            ]
            return numkit.mean_all(shape_attention.aggregate_pyramid(recal_v, view))

        gc = numkit.grad_check(loss, check_store, tol=1e-4)
        report["grad_check"] = {
            "max_rel_error": gc.max_rel_error,
            "tol": gc.tol,
            "passed": gc.passed,
        }
    out = json.dumps(report, sort_keys=True, indent=1)
    if args.out != Path("."):
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "attention_demo.json").write_text(out + "\n")
        print(f"wrote {args.out / 'attention_demo.json'}")
    else:
        print(out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "bench": cmd_bench,
        "attention-demo": cmd_attention_demo,
    }
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, numkit.DimensionError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
