"""Command-line entry point.

Verbs: gen-data, train, linear-probe, eval, grad-ratio, converge-probe,
ablate, sweep, retrieve. Every verb takes --config (JSON), --seed, --out and
--threads; results are invariant to the thread count. Exit codes: 0 success,
2 config error, 3 numerical failure, 4 probe outside tolerance with --check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import experiments as X
from . import losses as L
from . import train as T
from .config import FullConfig, load_config
from .errors import ConfigError, DataFormatError, LtclError, NumericalError
from .synth import generate_dataset, nearest_centroid_accuracy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


def _common(sub: argparse.ArgumentParser, out_required: bool = True) -> None:
    sub.add_argument("--config", type=str, default=None, help="JSON config file")
    sub.add_argument("--seed", type=int, default=None, help="override run seed")
    sub.add_argument("--out", type=str, required=out_required, help="output directory")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads (results are thread-count invariant)")


def _load(args) -> FullConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dataset(cfg: FullConfig, args):
    data_dir = getattr(args, "data", None)
    return X.dataset_from_config(cfg, data_dir, threads=args.threads)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    ds = generate_dataset(cfg.dataset.spec(), cfg.dataset.build_bank(),
                          threads=args.threads)
    ds.save(args.out)
    acc = nearest_centroid_accuracy(ds)
    print(f"dataset: {len(ds.train)} train / {len(ds.test)} test images, "
          f"{ds.spec.num_classes} classes, imbalance {ds.spec.imbalance_ratio:.0f}")
    print(f"raw-pixel nearest-centroid accuracy: {acc:.3f} "
          f"(chance {1 / ds.spec.num_classes:.3f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    s1 = cfg.stage1
    if args.variant is not None:
        import dataclasses
        s1 = dataclasses.replace(s1, variant=args.variant)
    result = T.stage1_train(ds, s1, cfg.loss, cfg.queue, cfg.encoder,
                            threads=args.threads, out_dir=args.out)
    report = {
        "experiment": "train",
        "variant": s1.variant,
        "seed": s1.seed,
        "steps": result.steps_run,
        "final_loss": result.metrics[-1]["loss_dscl"],
        "config": cfg.to_dict(),
    }
    (Path(args.out) / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2, default=str) + "\n")
    print(f"trained {s1.variant} for {result.steps_run} steps; "
          f"checkpoint and metrics written to {args.out}")
    return EXIT_OK


def cmd_linear_probe(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    model, _ = enc.load_checkpoint(args.checkpoint)
    clf = T.stage2_train_linear(model, ds, cfg.stage2, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "classifier.json").write_text(json.dumps({
        "weight": clf.weight.tolist(),
        "bias": clf.bias.tolist(),
    }) + "\n")
    print(f"linear classifier written to {out / 'classifier.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    model, _ = enc.load_checkpoint(args.checkpoint)
    blob = json.loads(Path(args.classifier).read_text())
    clf = T.LinearClassifier(weight=np.array(blob["weight"]),
                             bias=np.array(blob["bias"]))
    rep = T.evaluate_splits(clf, model, ds, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split_report.json").write_text(json.dumps({
        "overall": rep.overall, "many": rep.many, "medium": rep.medium,
        "few": rep.few, "per_class": rep.per_class,
    }, sort_keys=True, indent=2) + "\n")
    print(f"overall {rep.overall:.4f} | many {rep.many:.4f} "
          f"medium {rep.medium:.4f} few {rep.few:.4f}")
    return EXIT_OK


def cmd_grad_ratio(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    report = X.run_gradient_ratio_experiment(
        cfg, args.out, dataset=ds, seed=args.seed,
        anchors_per_class=args.anchors, threads=args.threads)
    print(f"buckets: {len(report.buckets)} (dropped {report.dropped_buckets}); "
          f"mean abs relative deviation: scl {report.mard_scl:.3f}, "
          f"dscl {report.mard_dscl:.3f}")
    if args.check and (report.mard_scl > 0.2 or report.mard_dscl > 0.2):
        print("check failed: deviation exceeds 20%", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_converge_probe(args) -> int:
    alphas = tuple(float(a) for a in args.alphas.split(","))
    sizes = tuple(int(p) for p in args.sizes.split(","))
    results = X.run_convergence_probe(args.out, alphas=alphas, sizes=sizes,
                                      anchors=args.anchors)
    worst = max(abs(r.p_plus - r.theory) for r in results)
    bad = [r for r in results if not r.converged]
    print(f"{len(results)} probes, max |p_plus - theory| = {worst:.2e}, "
          f"non-converged: {len(bad)}")
    if args.check and (bad or worst > 0.02):
        print("check failed: probe outside tolerance", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    variants = tuple(args.variants.split(",")) if args.variants else L.VARIANTS
    for v in variants:
        if v not in L.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {L.VARIANTS}")
    summaries = X.run_ablation(cfg, args.out, dataset=ds, variants=variants,
                               seeds=seeds, threads=args.threads)
    for name, s in summaries.items():
        print(f"{name:>18}: overall {s.mean_overall():.4f} "
              f"+/- {s.std_overall():.4f} | few {s.mean_split('few'):.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    X.run_hyperparameter_sweep(cfg, args.out, dataset=ds,
                               seed=args.seed if args.seed is not None else 0,
                               threads=args.threads)
    print(f"sweep tables written to {args.out}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, args)
    model, _ = enc.load_checkpoint(args.checkpoint)
    queries = X.run_patch_retrieval(model, ds, args.out, num_queries=args.queries,
                                    top_k=args.topk,
                                    seed=args.seed if args.seed is not None else 0,
                                    threads=args.threads)
    print(f"{len(queries)} queries, mean motif overlap "
          f"{X.mean_retrieval_overlap(queries):.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltcl",
        description="Decoupled supervised contrastive learning lab on "
                    "synthetic long-tailed data",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate and persist a dataset")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="stage-1 representation learning")
    _common(p)
    p.add_argument("--data", type=str, default=None, help="dataset directory")
    p.add_argument("--variant", type=str, default=None, choices=L.VARIANTS)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("linear-probe", help="stage-2 linear classifier")
    _common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--checkpoint", type=str, required=True)
    p.set_defaults(func=cmd_linear_probe)

    p = subs.add_parser("eval", help="split-aware evaluation")
    _common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--classifier", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("grad-ratio", help="positive gradient-ratio experiment")
    _common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--anchors", type=int, default=128, help="anchors per class")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_grad_ratio)

    p = subs.add_parser("converge-probe", help="free-embedding fixed-point probe")
    _common(p)
    p.add_argument("--alphas", type=str, default="0.1,0.3")
    p.add_argument("--sizes", type=str, default="1,4,16")
    p.add_argument("--anchors", type=int, default=4)
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_converge_probe)

    p = subs.add_parser("ablate", help="component ablation over seeds")
    _common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--variants", type=str, default=None,
                   help=f"comma list from {','.join(L.VARIANTS)}")
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("sweep", help="hyperparameter sweeps")
    _common(p)
    p.add_argument("--data", type=str, default=None)
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("retrieve", help="patch-based image retrieval")
    _common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--queries", type=int, default=12)
    p.add_argument("--topk", type=int, default=3)
    p.set_defaults(func=cmd_retrieve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except LtclError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
