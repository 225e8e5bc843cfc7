"""Experiment drivers: gradient-ratio measurement, loss-geometry convergence
probe, component ablation, patch retrieval and hyperparameter sweeps.

Every driver writes CSV tables (the contract), optional SVG plots rendered
purely from those tables, and a report.json embedding the exact config and
seeds, so each report can be reproduced bit-identically.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import losses as L
from . import train as T
from .config import FullConfig, config_hash
from .errors import ConfigError
from .memqueue import MemoryQueue
from .synth import (AugmentationPolicy, PatchBox, SynthDataset, augment_two_views,
                    generate_dataset, load_dataset)

_ROLE_FILL = 21
_ROLE_ANCHOR = 22
_ROLE_PROBE_INIT = 23
_ROLE_VARIANT = 24
_ROLE_RETRIEVE = 25


def dataset_from_config(cfg: FullConfig, data_dir: str | Path | None = None,
                        threads: int = 1) -> SynthDataset:
    if data_dir is not None:
        return load_dataset(data_dir)
    return generate_dataset(cfg.dataset.spec(), cfg.dataset.build_bank(), threads=threads)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_report(out: Path, experiment: str, cfg: FullConfig | None,
                  payload: dict) -> None:
    report = {"experiment": experiment, **payload}
    if cfg is not None:
        report["config"] = cfg.to_dict()
        report["config_hash"] = config_hash(cfg)
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2, default=str) + "\n"
    )


def _plot(out: Path, name: str, draw) -> str | None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        matplotlib.rcParams["svg.hashsalt"] = "ltcl"
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    draw(ax)
    fig.tight_layout()
    path = out / name
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return str(path)


# ---------------------------------------------------------------------------
# gradient-ratio measurement at initialization


@dataclass
class RatioBucket:
    num_positives: int
    anchors: int
    mean_ratio_scl: float
    mean_ratio_dscl: float


@dataclass
class GradientRatioReport:
    buckets: list[RatioBucket]
    mard_scl: float
    mard_dscl: float
    alpha: float
    dropped_buckets: list[int]


def _fill_queue(dataset: SynthDataset, model: enc.ConvEncoder, queue: MemoryQueue,
                policy: AugmentationPolicy, seed: int, batch: int = 64) -> None:
    """Enqueue EMA-style embeddings of augmented views until the queue is full."""
    pixels = dataset.train_pixels()
    labels = dataset.train_labels()
    rng = np.random.default_rng(np.random.SeedSequence((seed, _ROLE_FILL)))
    pt = model.bind(requires_grad=False)
    passes = 0
    while len(queue) < queue.capacity:
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            views = [
                augment_two_views(pixels[i], policy, (seed, _ROLE_FILL, passes, int(i)))[1]
                for i in idx
            ]
            z = enc.encode_project(pt, np.stack([v.pixels for v in views])).data
            queue.enqueue_batch(z, labels[idx])
            if len(queue) >= queue.capacity:
                break
        passes += 1


def run_gradient_ratio_experiment(cfg: FullConfig, out_dir: str | Path,
                                  dataset: SynthDataset | None = None,
                                  seed: int | None = None,
                                  anchors_per_class: int = 128,
                                  min_anchors: int = 10,
                                  threads: int = 1) -> GradientRatioReport:
    """Measure the positive gradient-norm split of a random-init encoder.

    Anchors are bucketed by the exact same-class count observed in a frozen
    queue snapshot; bucket means are compared against 1/|P| (equal-weight
    loss) and alpha/(1-alpha) (decoupled loss).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.stage1.seed if seed is None else seed
    dataset = dataset if dataset is not None else dataset_from_config(cfg, threads=threads)
    policy = AugmentationPolicy(out_size=cfg.encoder.input_size)
    init_seed = int(np.random.SeedSequence((seed, _ROLE_PROBE_INIT)).generate_state(1)[0])
    model = enc.ConvEncoder(cfg.encoder, seed=init_seed)
    queue = MemoryQueue(cfg.queue.capacity, cfg.encoder.d_proj)
    _fill_queue(dataset, model, queue, policy, seed, batch=cfg.stage1.batch_size)
    snapshot = queue.snapshot()

    pixels = dataset.train_pixels()
    labels = dataset.train_labels()
    alpha = cfg.loss.alpha
    pt = model.bind(requires_grad=False)
    per_bucket: dict[int, list[tuple[float, float]]] = {}
    for label in range(1, dataset.spec.num_classes + 1):
        p = len(snapshot.positives_of(label))
        if p < 1:
            continue
        idx = np.nonzero(labels == label)[0]
        picks = [int(idx[i % len(idx)]) for i in range(anchors_per_class)]
        views = [
            augment_two_views(pixels[i], policy, (seed, _ROLE_ANCHOR, label, j))
            for j, i in enumerate(picks)
        ]
        va = np.stack([a.pixels for a, _ in views])
        vb = np.stack([b.pixels for _, b in views])
        z = enc.encode_project(pt, va).data
        zp = enc.encode_project(pt, vb).data
        pairs = per_bucket.setdefault(p, [])
        for j in range(anchors_per_class):
            r_scl = L.positive_gradient_ratio(z[j], zp[j], snapshot, label,
                                              cfg.loss.tau, "scl")
            r_dscl = L.positive_gradient_ratio(z[j], zp[j], snapshot, label,
                                               cfg.loss.tau, "dscl", alpha)
            pairs.append((r_scl, r_dscl))

    buckets, dropped = [], []
    for p in sorted(per_bucket):
        pairs = per_bucket[p]
        if len(pairs) < min_anchors:
            dropped.append(p)
            continue
        arr = np.array(pairs)
        buckets.append(RatioBucket(num_positives=p, anchors=len(pairs),
                                   mean_ratio_scl=float(arr[:, 0].mean()),
                                   mean_ratio_dscl=float(arr[:, 1].mean())))
    if not buckets:
        raise ConfigError("no gradient-ratio bucket reached the anchor minimum")
    flat = alpha / (1.0 - alpha)
    mard_scl = float(np.mean([
        abs(b.mean_ratio_scl - 1.0 / b.num_positives) / (1.0 / b.num_positives)
        for b in buckets
    ]))
    mard_dscl = float(np.mean([
        abs(b.mean_ratio_dscl - flat) / flat for b in buckets
    ]))

    rows = [[b.num_positives, b.anchors, b.mean_ratio_scl, 1.0 / b.num_positives,
             b.mean_ratio_dscl, flat] for b in buckets]
    _write_csv(out / "gradient_ratio.csv",
               ["num_positives", "anchors", "mean_ratio_scl", "theory_scl",
                "mean_ratio_dscl", "theory_dscl"], rows)

    def draw(ax):
        ps = [b.num_positives for b in buckets]
        ax.loglog(ps, [b.mean_ratio_scl for b in buckets], "o-", label="scl measured")
        ax.loglog(ps, [1.0 / p for p in ps], "k--", label="scl theory 1/|P|")
        ax.loglog(ps, [b.mean_ratio_dscl for b in buckets], "s-", label="dscl measured")
        ax.loglog(ps, [flat] * len(ps), "k:", label=f"dscl theory {flat:.3f}")
        ax.set_xlabel("queue positives |P|")
        ax.set_ylabel("positive gradient-norm ratio")
        ax.legend()

    plot = _plot(out, "gradient_ratio.svg", draw)
    _write_report(out, "gradient-ratio", cfg, {
        "seed": seed,
        "mard_scl": mard_scl,
        "mard_dscl": mard_dscl,
        "dropped_buckets": dropped,
        "tables": ["gradient_ratio.csv"],
        "plots": [plot] if plot else [],
    })
    return GradientRatioReport(buckets=buckets, mard_scl=mard_scl,
                               mard_dscl=mard_dscl, alpha=alpha, dropped_buckets=dropped)


# ---------------------------------------------------------------------------
# loss-geometry convergence probe on free embeddings


@dataclass
class ConvergenceResult:
    mode: str
    alpha: float | None
    num_positives: int
    anchor_seed: int
    p_plus: float
    theory: float
    gradient_norm: float
    steps: int
    converged: bool


def _probe_candidates(p: int, num_negatives: int = 8, extra_dims: int = 10,
                      bundle_angle: float = np.pi / 4) -> np.ndarray:
    """One positive bundle around a center direction plus far negatives."""
    d = p + 1 + num_negatives + extra_dims
    cands = np.zeros((p + 1 + num_negatives, d))
    for j in range(p + 1):
        cands[j, 0] = np.cos(bundle_angle)
        cands[j, 1 + j] = np.sin(bundle_angle)
    for k in range(num_negatives):
        cands[p + 1 + k, 0] = -0.95
        cands[p + 1 + k, p + 2 + k] = np.sqrt(1.0 - 0.95 ** 2)
    return cands


def _probe_gradient(cands, z, targets, tau):
    logits = cands @ z / tau
    e = np.exp(logits - logits.max())
    probs = e / e.sum()
    g = (probs - targets) @ cands / tau
    return probs, g, g - (g @ z) * z


def _newton_polish(cands, z, targets, tau, tol=1e-9, iters=40):
    d = len(z)
    _, g, _ = _probe_gradient(cands, z, targets, tau)
    mu = g @ z
    for _ in range(iters):
        probs, g, gt = _probe_gradient(cands, z, targets, tau)
        gn = np.linalg.norm(gt)
        if gn < tol:
            return z, True
        hess = cands.T @ ((np.diag(probs) - np.outer(probs, probs)) @ cands) / tau ** 2
        resid = np.concatenate([g - mu * z, [(z @ z - 1.0) / 2.0]])
        jac = np.zeros((d + 1, d + 1))
        jac[:d, :d] = hess - mu * np.eye(d)
        jac[:d, d] = -z
        jac[d, :d] = z
        try:
            delta = np.linalg.solve(jac, -resid)
        except np.linalg.LinAlgError:
            return z, False
        accepted, scale = False, 1.0
        for _ in range(25):
            zn = z + scale * delta[:d]
            zn /= np.linalg.norm(zn)
            _, _, gtn = _probe_gradient(cands, zn, targets, tau)
            if np.linalg.norm(gtn) < gn:
                z, mu = zn, mu + scale * delta[d]
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            return z, False
    _, _, gt = _probe_gradient(cands, z, targets, tau)
    return z, np.linalg.norm(gt) < tol


def free_embedding_probe(mode: str, alpha: float | None, num_positives: int,
                         tau: float = 0.07, anchor_seed: int = 0,
                         max_steps: int = 400_000,
                         grad_tol: float = 1e-6) -> ConvergenceResult:
    """Gradient-descend one free unit anchor on the loss until stationarity.

    The candidate set is fixed: |P|+1 positives bundled around a center plus
    far negatives. Adam steps with a gradient-scaled learning rate move the
    anchor on the sphere; once close, a damped Newton solve of the spherical
    stationarity system finishes the job. Reports the terminal probability
    of the augmentation positive against its theoretical fixed point.
    """
    p = num_positives
    cands = _probe_candidates(p)
    targets = np.zeros(cands.shape[0])
    if mode == "scl":
        targets[:p + 1] = 1.0 / (p + 1)
        theory = 1.0 / (p + 1)
    elif mode == "dscl":
        if alpha is None:
            raise ConfigError("dscl probe needs alpha")
        targets[0] = alpha
        targets[1:p + 1] = (1.0 - alpha) / p
        theory = alpha
    else:
        raise ConfigError(f"unknown probe mode {mode!r}")
    d = cands.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence((anchor_seed, mode == "dscl", p)))
    z = rng.normal(size=d)
    z /= np.linalg.norm(z)
    z = z + 0.5 * cands[:p + 1].mean(axis=0)  # start facing the positive bundle
    z /= np.linalg.norm(z)

    m1 = np.zeros(d)
    m2 = np.zeros(d)
    b1, b2, eps = 0.9, 0.999, 1e-12
    next_polish = 0
    steps = 0
    for step in range(1, max_steps + 1):
        steps = step
        probs, g, gt = _probe_gradient(cands, z, targets, tau)
        gn = np.linalg.norm(gt)
        if gn < grad_tol:
            break
        if gn < 1e-5 and step >= next_polish:
            zp, ok = _newton_polish(cands, z, targets, tau)
            if ok:
                z = zp
                break
            next_polish = step + 2000
        lr = max(3e-3 * min(1.0, gn / 1e-4) ** 0.5, 1e-5)
        m1 = b1 * m1 + (1 - b1) * gt
        m2 = b2 * m2 + (1 - b2) * gt * gt
        z = z - lr * (m1 / (1 - b1 ** step)) / (np.sqrt(m2 / (1 - b2 ** step)) + eps)
        z /= np.linalg.norm(z)
    probs, _, gt = _probe_gradient(cands, z, targets, tau)
    gn = float(np.linalg.norm(gt))
    return ConvergenceResult(mode=mode, alpha=alpha, num_positives=p,
                             anchor_seed=anchor_seed, p_plus=float(probs[0]),
                             theory=theory, gradient_norm=gn, steps=steps,
                             converged=gn < grad_tol)


def run_convergence_probe(out_dir: str | Path,
                          alphas: tuple[float, ...] = (0.1, 0.3),
                          sizes: tuple[int, ...] = (1, 4, 16),
                          anchors: int = 4,
                          tau: float = 0.07) -> list[ConvergenceResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: list[ConvergenceResult] = []
    jobs: list[tuple[str, float | None]] = [("scl", None)] + [("dscl", a) for a in alphas]
    for mode, alpha in jobs:
        for p in sizes:
            for seed in range(anchors):
                results.append(free_embedding_probe(mode, alpha, p, tau=tau,
                                                    anchor_seed=seed))
    rows = [[r.mode, "" if r.alpha is None else r.alpha, r.num_positives,
             r.anchor_seed, r.p_plus, r.theory, r.gradient_norm, r.steps,
             int(r.converged)] for r in results]
    _write_csv(out / "convergence.csv",
               ["mode", "alpha", "num_positives", "anchor_seed", "p_plus",
                "theory", "gradient_norm", "steps", "converged"], rows)

    def draw(ax):
        for mode, alpha in jobs:
            sel = [r for r in results if r.mode == mode and r.alpha == alpha]
            xs = [r.num_positives for r in sel]
            ys = [r.p_plus for r in sel]
            label = mode if alpha is None else f"{mode} a={alpha}"
            ax.plot(xs, ys, "o", label=label)
        ps = sorted(set(sizes))
        ax.plot(ps, [1.0 / (p + 1) for p in ps], "k--", label="1/(|P|+1)")
        ax.set_xlabel("queue positives |P|")
        ax.set_ylabel("terminal p(z+|z)")
        ax.legend()

    plot = _plot(out, "convergence.svg", draw)
    _write_report(out, "converge-probe", None, {
        "alphas": list(alphas),
        "sizes": list(sizes),
        "anchors": anchors,
        "tau": tau,
        "non_converged": sum(1 for r in results if not r.converged),
        "max_abs_deviation": max(abs(r.p_plus - r.theory) for r in results),
        "tables": ["convergence.csv"],
        "plots": [plot] if plot else [],
    })
    return results


# ---------------------------------------------------------------------------
# ablation and sweeps


@dataclass
class VariantSummary:
    variant: str
    seeds: list[int]
    reports: list[T.SplitReport]

    def mean_overall(self) -> float:
        return float(np.mean([r.overall for r in self.reports]))

    def std_overall(self) -> float:
        return float(np.std([r.overall for r in self.reports], ddof=1)) \
            if len(self.reports) > 1 else 0.0

    def mean_split(self, name: str) -> float:
        return float(np.mean([getattr(r, name) for r in self.reports]))


def train_and_evaluate(cfg: FullConfig, dataset: SynthDataset, variant: str,
                       seed: int, threads: int = 1,
                       out_dir: str | Path | None = None) -> T.SplitReport:
    run_seed = int(np.random.SeedSequence((seed, _ROLE_VARIANT,
                                           L.VARIANTS.index(variant))).generate_state(1)[0])
    s1 = dataclasses.replace(cfg.stage1, variant=variant, seed=run_seed)
    s2 = dataclasses.replace(cfg.stage2, seed=run_seed)
    result = T.stage1_train(dataset, s1, cfg.loss, cfg.queue, cfg.encoder,
                            threads=threads, out_dir=out_dir)
    classifier = T.stage2_train_linear(result.model, dataset, s2, threads=threads)
    return T.evaluate_splits(classifier, result.model, dataset, threads=threads)


def run_ablation(cfg: FullConfig, out_dir: str | Path,
                 dataset: SynthDataset | None = None,
                 variants: tuple[str, ...] = L.VARIANTS,
                 seeds: tuple[int, ...] = (0, 1, 2),
                 threads: int = 1) -> dict[str, VariantSummary]:
    """Train every variant over the seed set and tabulate split accuracies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else dataset_from_config(cfg, threads=threads)
    jobs = [(variant, seed) for variant in variants for seed in seeds]

    def run(job):
        variant, seed = job
        return train_and_evaluate(cfg, dataset, variant, seed, threads=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 4)) as pool:
            reports = list(pool.map(run, jobs))
    else:
        reports = [run(j) for j in jobs]

    summaries: dict[str, VariantSummary] = {}
    rows = []
    for (variant, seed), rep in zip(jobs, reports):
        summaries.setdefault(variant, VariantSummary(variant, [], []))
        summaries[variant].seeds.append(seed)
        summaries[variant].reports.append(rep)
        rows.append([variant, seed, rep.many, rep.medium, rep.few, rep.overall])
    _write_csv(out / "ablation_runs.csv",
               ["variant", "seed", "many", "medium", "few", "overall"], rows)
    agg_rows = [
        [v.variant, v.mean_split("many"), v.mean_split("medium"), v.mean_split("few"),
         v.mean_overall(), v.std_overall()]
        for v in summaries.values()
    ]
    _write_csv(out / "ablation_table.csv",
               ["variant", "many", "medium", "few", "overall", "overall_std"], agg_rows)

    def draw(ax):
        names = list(summaries)
        means = [summaries[n].mean_overall() for n in names]
        stds = [summaries[n].std_overall() for n in names]
        ax.bar(range(len(names)), means, yerr=stds, capsize=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("overall accuracy")

    plot = _plot(out, "ablation.svg", draw)
    _write_report(out, "ablate", cfg, {
        "variants": list(variants),
        "seeds": list(seeds),
        "tables": ["ablation_runs.csv", "ablation_table.csv"],
        "plots": [plot] if plot else [],
    })
    return summaries


def run_hyperparameter_sweep(cfg: FullConfig, out_dir: str | Path,
                             dataset: SynthDataset | None = None,
                             alphas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.3, 0.5, 1.0),
                             patch_counts: tuple[int, ...] = (1, 2, 3, 4, 5),
                             lams: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0),
                             seed: int = 0,
                             threads: int = 1) -> dict[str, list[list]]:
    """One-axis-at-a-time sweeps of alpha, patch count and the loss weight."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else dataset_from_config(cfg, threads=threads)
    tables: dict[str, list[list]] = {}

    def evaluate(loss_cfg: L.LossConfig, variant: str) -> T.SplitReport:
        sub = dataclasses.replace(cfg, loss=loss_cfg)
        return train_and_evaluate(sub, dataset, variant, seed, threads=threads)

    alpha_rows = []
    for a in alphas:
        rep = evaluate(dataclasses.replace(cfg.loss, alpha=a), "dscl+pbsd")
        alpha_rows.append([a, rep.many, rep.medium, rep.few, rep.overall])
    _write_csv(out / "sweep_alpha.csv",
               ["alpha", "many", "medium", "few", "overall"], alpha_rows)
    tables["alpha"] = alpha_rows

    l_rows = []
    for num in patch_counts:
        rep = evaluate(dataclasses.replace(cfg.loss, num_patches=num), "dscl+pbsd")
        l_rows.append([num, rep.many, rep.medium, rep.few, rep.overall])
    _write_csv(out / "sweep_patches.csv",
               ["num_patches", "many", "medium", "few", "overall"], l_rows)
    tables["patches"] = l_rows

    lam_rows = []
    for lam in lams:
        rep = evaluate(dataclasses.replace(cfg.loss, lam=lam), "dscl+pbsd")
        lam_rows.append([lam, rep.many, rep.medium, rep.few, rep.overall])
    _write_csv(out / "sweep_lambda.csv",
               ["lam", "many", "medium", "few", "overall"], lam_rows)
    tables["lambda"] = lam_rows

    def draw(ax):
        ax.plot([r[0] for r in alpha_rows], [r[4] for r in alpha_rows], "o-",
                label="alpha")
        ax.set_xlabel("alpha")
        ax.set_ylabel("overall accuracy")
        ax.legend()

    plot = _plot(out, "sweep_alpha.svg", draw)
    _write_report(out, "sweep", cfg, {
        "seed": seed,
        "tables": ["sweep_alpha.csv", "sweep_patches.csv", "sweep_lambda.csv"],
        "plots": [plot] if plot else [],
    })
    return tables


# ---------------------------------------------------------------------------
# patch-based retrieval


@dataclass
class RetrievalQuery:
    image_index: int
    motif_id: int
    box: PatchBox
    ranked_indices: list[int]
    overlap_scores: list[float]


def run_patch_retrieval(model: enc.ConvEncoder, dataset: SynthDataset,
                        out_dir: str | Path, num_queries: int = 12, top_k: int = 3,
                        seed: int = 0, threads: int = 1) -> list[RetrievalQuery]:
    """Rank test images by similarity to ROI-pooled query patches.

    Queries are ground-truth motif boxes from test images; the overlap score
    of a retrieved image is the fraction of the query box's motifs that also
    occur in the retrieved image's motif set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if top_k > len(dataset.test):
        top_k = len(dataset.test)
    pixels = dataset.test_pixels()
    pt = model.bind(requires_grad=False)
    gallery = []
    for start in range(0, len(pixels), 256):
        gallery.append(enc.encode_project(pt, pixels[start:start + 256].astype(np.float64)).data)
    gallery = np.concatenate(gallery, axis=0)

    rng = np.random.default_rng(np.random.SeedSequence((seed, _ROLE_RETRIEVE)))
    order = rng.permutation(len(dataset.test))
    queries: list[RetrievalQuery] = []
    for idx in order:
        image = dataset.test[int(idx)]
        if not image.motif_placements:
            continue
        mid, box = image.motif_placements[int(rng.integers(0, len(image.motif_placements)))]
        u, _ = enc.encode(pt, image.pixels.astype(np.float64)[None])
        c = enc.roi_pool_project(pt, u, [[box]]).data[0]
        scores = gallery @ c
        scores[int(idx)] = -np.inf  # retrieval excludes the query image itself
        ranked = np.argsort(-scores)[:top_k]
        query_motifs = {m for m, b in image.motif_placements
                        if _boxes_overlap(b, box)}
        overlaps = []
        for r in ranked:
            rmotifs = {m for m, _ in dataset.test[int(r)].motif_placements}
            overlaps.append(len(query_motifs & rmotifs) / max(1, len(query_motifs)))
        queries.append(RetrievalQuery(image_index=int(idx), motif_id=int(mid), box=box,
                                      ranked_indices=[int(r) for r in ranked],
                                      overlap_scores=overlaps))
        if len(queries) >= num_queries:
            break

    rows = [[q.image_index, q.motif_id, q.box.cx, q.box.cy, q.box.w, q.box.h,
             ";".join(map(str, q.ranked_indices)),
             ";".join(repr(s) for s in q.overlap_scores)] for q in queries]
    _write_csv(out / "retrieval.csv",
               ["query_index", "motif_id", "cx", "cy", "w", "h",
                "top_k_indices", "overlap_scores"], rows)
    mean_overlap = float(np.mean([s for q in queries for s in q.overlap_scores]))
    _plot_retrieval_grid(out, dataset, queries)
    _write_report(out, "retrieve", None, {
        "seed": seed,
        "num_queries": len(queries),
        "top_k": top_k,
        "mean_overlap": mean_overlap,
        "tables": ["retrieval.csv"],
    })
    return queries


def mean_retrieval_overlap(queries: list[RetrievalQuery]) -> float:
    return float(np.mean([s for q in queries for s in q.overlap_scores]))


def _boxes_overlap(a: PatchBox, b: PatchBox) -> bool:
    return not (a.x1 <= b.x0 or b.x1 <= a.x0 or a.y1 <= b.y0 or b.y1 <= a.y0)


def _plot_retrieval_grid(out: Path, dataset: SynthDataset,
                         queries: list[RetrievalQuery]) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        from matplotlib import patches
    except ImportError:
        return
    n = min(len(queries), 6)
    if n == 0:
        return
    k = len(queries[0].ranked_indices)
    fig, axes = plt.subplots(n, k + 1, figsize=(2 * (k + 1), 2 * n), squeeze=False)
    for row in range(n):
        q = queries[row]
        img = dataset.test[q.image_index]
        ax = axes[row][0]
        ax.imshow(img.pixels)
        size = img.pixels.shape[0]
        rect = patches.Rectangle((q.box.x0 * size, q.box.y0 * size),
                                 q.box.w * size, q.box.h * size,
                                 fill=False, edgecolor="yellow", linewidth=2)
        ax.add_patch(rect)
        ax.set_title(f"query c{img.label}", fontsize=8)
        ax.axis("off")
        for col, r in enumerate(q.ranked_indices, start=1):
            ax = axes[row][col]
            ax.imshow(dataset.test[r].pixels)
            ax.set_title(f"c{dataset.test[r].label} {q.overlap_scores[col-1]:.2f}",
                         fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "retrieval_grid.png", dpi=100)
    plt.close(fig)
