"""Two-stage training: contrastive representation learning, then a linear
classifier on the frozen backbone with class-balanced sampling.

Stage 1 follows the momentum-encoder recipe: each image yields two
augmented global views; the online encoder embeds view A (and its patch
crops), the EMA encoder embeds view B to provide the augmentation positive
and the rows enqueued into the memory queue. Losses are skipped until the
queue is half full. Stage 2 freezes the backbone, discards the projection
head and trains a softmax classifier on pooled features.

All randomness is derived from named SeedSequence roles so that runs are
bit-reproducible and independent of worker-thread count.
"""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import losses as L
from .errors import ConfigError, NumericalError
from .memqueue import MemoryQueue
from .synth import AugmentationPolicy, SynthDataset, augment_two_views, sample_patch_boxes

# seed roles for stage-1 sub-streams
_ROLE_INIT = 10
_ROLE_SHUFFLE = 11
_ROLE_AUG = 12
_ROLE_BOX = 13
_ROLE_PROBE = 14
_ROLE_STAGE2 = 15

METRICS_HEADER = (
    "step", "epoch", "loss_dscl", "loss_pbsd", "lr", "queue_fill",
    "mean_ratio_head", "mean_ratio_tail", "p_plus_head", "p_plus_tail",
)


@dataclass(frozen=True)
class QueueConfig:
    capacity: int = 2048

    def __post_init__(self):
        if self.capacity < 2:
            raise ConfigError(f"queue capacity must be >= 2, got {self.capacity}")


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 100
    batch_size: int = 64
    peak_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.999
    variant: str = "dscl+pbsd"
    seed: int = 0
    probe_per_class: int = 16
    # patch terms against a near-random encoder collapse the features (no
    # batch norm breaks the symmetry), so they stay off for the delay epochs
    # and then ramp linearly to full strength over the ramp epochs
    patch_delay_epochs: int = 10
    patch_ramp_epochs: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak learning rate must be > 0, got {self.peak_lr}")
        if self.variant not in L.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema momentum must lie in [0, 1], got {self.ema_momentum}")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1.0
    milestones: tuple[int, ...] = (20, 30)
    gamma: float = 0.1
    momentum: float = 0.9
    class_balanced: bool = True
    seed: int = 0

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must increase, got {self.milestones}")
        if any(not 0 < m < self.epochs for m in self.milestones):
            raise ConfigError(f"milestones must fall inside the epoch range, "
                              f"got {self.milestones} for {self.epochs} epochs")


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (feat_dim, K)
    bias: np.ndarray  # (K,)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=1) + 1  # labels are 1-based


@dataclass(frozen=True)
class SplitReport:
    overall: float
    many: float
    medium: float
    few: float
    per_class: dict[int, float]

    def as_row(self) -> dict[str, float]:
        return {"many": self.many, "medium": self.medium, "few": self.few,
                "overall": self.overall}


def cosine_lr(peak: float, step: int, total_steps: int) -> float:
    return peak * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


class SgdMomentum:
    """SGD with classic momentum and decoupled-from-nothing weight decay
    added to the raw gradient, matching the usual contrastive recipes."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        update = grad + self.weight_decay * param
        buf = self.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(param)
            self.buffers[name] = buf
        buf *= self.momentum
        buf += update
        param -= lr * buf


@dataclass
class StepStats:
    step: int
    epoch: int
    loss_contrastive: float | None
    loss_patch: float | None
    lr: float
    queue_fill: float


@dataclass
class TrainResult:
    model: enc.ConvEncoder
    ema: enc.EmaEncoder
    metrics: list[dict]
    steps_run: int


class Stage1Trainer:
    def __init__(self, dataset: SynthDataset, cfg: Stage1Config, loss_cfg: L.LossConfig,
                 queue_cfg: QueueConfig, enc_cfg: enc.EncoderConfig,
                 policy: AugmentationPolicy | None = None, threads: int = 1):
        self.dataset = dataset
        self.cfg = cfg
        self.loss_cfg = loss_cfg
        self.enc_cfg = enc_cfg
        self.policy = policy or AugmentationPolicy(out_size=enc_cfg.input_size)
        self.threads = threads
        init_seed = int(np.random.SeedSequence((cfg.seed, _ROLE_INIT)).generate_state(1)[0])
        self.model = enc.ConvEncoder(enc_cfg, seed=init_seed)
        self.ema = enc.EmaEncoder(self.model, momentum=cfg.ema_momentum)
        self.queue = MemoryQueue(queue_cfg.capacity, enc_cfg.d_proj)
        self.optimizer = SgdMomentum(cfg.momentum, cfg.weight_decay)
        self.train_pixels = dataset.train_pixels()
        self.train_labels = dataset.train_labels()
        self.global_step = 0
        steps_per_epoch = int(np.ceil(len(self.train_labels) / cfg.batch_size))
        self.total_steps = cfg.epochs * steps_per_epoch
        self.steps_per_epoch = steps_per_epoch

    # -- plumbing

    def _augment_batch(self, indices: np.ndarray, epoch: int
                       ) -> tuple[np.ndarray, np.ndarray]:
        jobs = [
            (self.train_pixels[i], (self.cfg.seed, _ROLE_AUG, epoch, self.global_step, int(i)))
            for i in indices
        ]

        def run(job):
            pixels, seed = job
            return augment_two_views(pixels, self.policy, seed)

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                views = list(pool.map(run, jobs))
        else:
            views = [run(j) for j in jobs]
        view_a = np.stack([va.pixels for va, _ in views])
        view_b = np.stack([vb.pixels for _, vb in views])
        return view_a, view_b

    def _boxes_for_batch(self, batch: int, epoch: int):
        rng = np.random.default_rng(
            np.random.SeedSequence((self.cfg.seed, _ROLE_BOX, epoch, self.global_step))
        )
        return [
            sample_patch_boxes(self.loss_cfg.num_patches, self.loss_cfg.patch_scale,
                               self.loss_cfg.patch_aspect, seed=rng)
            for _ in range(batch)
        ]

    @property
    def warmed_up(self) -> bool:
        return len(self.queue) >= self.queue.capacity // 2

    def _patch_ramp(self) -> float:
        delay = self.cfg.patch_delay_epochs * self.steps_per_epoch
        if self.global_step < delay:
            return 0.0
        ramp_steps = self.cfg.patch_ramp_epochs * self.steps_per_epoch
        if ramp_steps <= 0:
            return 1.0
        return min(1.0, (self.global_step - delay) / ramp_steps)

    # -- the training step

    def step(self, indices: np.ndarray, epoch: int) -> StepStats:
        cfg, lcfg = self.cfg, self.loss_cfg
        lr = cosine_lr(cfg.peak_lr, self.global_step, self.total_steps)
        view_a, view_b = self._augment_batch(indices, epoch)
        labels = self.train_labels[indices]

        zplus = enc.encode_project(self.ema.bind(), view_b).data
        snapshot = self.queue.snapshot()
        warmed = self.warmed_up

        stats = StepStats(step=self.global_step, epoch=epoch, loss_contrastive=None,
                          loss_patch=None, lr=lr, queue_fill=self.queue.fill_fraction)
        if warmed:
            pt = self.model.bind(requires_grad=True)
            ramp = self._patch_ramp()
            variant = cfg.variant
            if ramp == 0.0 and variant not in ("scl", "dscl"):
                # patch terms are fully off: run the plain contrastive base
                variant = "scl" if variant.startswith("scl") else "dscl"
            needs_boxes = variant in ("scl+pbsd", "dscl+pbsd", "dscl+multicrop")
            boxes = self._boxes_for_batch(len(indices), epoch) if needs_boxes else None
            ema_pt = self.ema.bind() if lcfg.pbsd_target_source == "ema" else None
            step_lcfg = lcfg
            if ramp < 1.0 and lcfg.lam > 0:
                step_lcfg = dataclasses.replace(lcfg, lam=lcfg.lam * ramp)
            total, c_val, p_val = L.overall_loss(
                pt, view_a, zplus, labels, snapshot, step_lcfg, boxes,
                variant=variant, ema_pt=ema_pt, crop_weight=ramp,
            )
            if not np.isfinite(total.data):
                flat = np.concatenate([p.ravel() for p in self.model.params.values()])
                raise NumericalError(
                    f"non-finite loss at step {self.global_step}: contrastive={c_val}, "
                    f"patch={p_val}, param_absmax={np.abs(flat).max():.3e}"
                )
            total.backward()
            self.model.apply_gradients(
                pt, lambda name, p, g: self.optimizer.step(name, p, g, lr)
            )
            self.ema.update(self.model.params)
            stats.loss_contrastive = c_val
            stats.loss_patch = p_val
        self.queue.enqueue_batch(zplus, labels)
        self.global_step += 1
        return stats

    # -- per-epoch probes on fixed head-most / tail-most anchors

    def probe(self, epoch: int) -> dict[str, float]:
        out: dict[str, float] = {}
        if not self.warmed_up:
            return out
        snapshot = self.queue.snapshot()
        mode = "scl" if self.cfg.variant.startswith("scl") else "dscl"
        alpha = None if mode == "scl" else self.loss_cfg.alpha
        for tag, label in (("head", 1), ("tail", self.dataset.spec.num_classes)):
            idx = np.nonzero(self.train_labels == label)[0]
            if len(idx) == 0:
                continue
            picks = [idx[i % len(idx)] for i in range(self.cfg.probe_per_class)]
            seeds = [(self.cfg.seed, _ROLE_PROBE, epoch, int(i)) for i in range(len(picks))]
            views = [
                augment_two_views(self.dataset.train[picks[i]], self.policy, seeds[i])
                for i in range(len(picks))
            ]
            view_a = np.stack([va.pixels for va, _ in views])
            view_b = np.stack([vb.pixels for _, vb in views])
            z = enc.encode_project(self.model.bind(requires_grad=False), view_a).data
            zp = enc.encode_project(self.ema.bind(), view_b).data
            ratios, pplus = [], []
            for i in range(len(picks)):
                dist = L.conditional_prob(z[i], zp[i], snapshot, self.loss_cfg.tau)
                pplus.append(dist.p_plus)
                if len(snapshot.positives_of(label)) >= 1:
                    ratios.append(L.positive_gradient_ratio(
                        z[i], zp[i], snapshot, label, self.loss_cfg.tau, mode, alpha))
            if ratios:
                out[f"mean_ratio_{tag}"] = float(np.mean(ratios))
            out[f"p_plus_{tag}"] = float(np.mean(pplus))
        return out


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in METRICS_HEADER])


def stage1_train(dataset: SynthDataset, cfg: Stage1Config, loss_cfg: L.LossConfig,
                 queue_cfg: QueueConfig, enc_cfg: enc.EncoderConfig,
                 policy: AugmentationPolicy | None = None, threads: int = 1,
                 out_dir: str | Path | None = None) -> TrainResult:
    """Run stage-1 representation learning; returns model, EMA and metrics."""
    trainer = Stage1Trainer(dataset, cfg, loss_cfg, queue_cfg, enc_cfg,
                            policy=policy, threads=threads)
    n = len(trainer.train_labels)
    metrics: list[dict] = []
    for epoch in range(cfg.epochs):
        probe_vals = trainer.probe(epoch)
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _ROLE_SHUFFLE, epoch))
        ).permutation(n)
        for start in range(0, n, cfg.batch_size):
            stats = trainer.step(order[start:start + cfg.batch_size], epoch)
            metrics.append({
                "step": stats.step,
                "epoch": epoch,
                "loss_dscl": stats.loss_contrastive,
                "loss_pbsd": stats.loss_patch,
                "lr": stats.lr,
                "queue_fill": stats.queue_fill,
                **{k: probe_vals.get(k) for k in
                   ("mean_ratio_head", "mean_ratio_tail", "p_plus_head", "p_plus_tail")},
            })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        enc.save_checkpoint(out / "model.ckpt", trainer.model, cfg.seed,
                            trainer.global_step)
        write_metrics_csv(out / "metrics.csv", metrics)
    return TrainResult(model=trainer.model, ema=trainer.ema, metrics=metrics,
                       steps_run=trainer.global_step)


# ---------------------------------------------------------------------------
# stage 2: frozen backbone, linear classifier


def extract_features(model: enc.ConvEncoder, pixels: np.ndarray, batch: int = 256,
                     threads: int = 1) -> np.ndarray:
    """Pooled backbone features of canonical images, computed batchwise."""
    pt = model.bind(requires_grad=False)
    chunks = [pixels[i:i + batch] for i in range(0, len(pixels), batch)]

    def run(chunk):
        _, v = enc.encode(pt, np.asarray(chunk, dtype=np.float64))
        return v.data

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(run, chunks))
    else:
        feats = [run(c) for c in chunks]
    return np.concatenate(feats, axis=0)


def class_balanced_draw(rng: np.random.Generator, by_class: dict[int, np.ndarray],
                        size: int) -> np.ndarray:
    """Each draw picks a class uniformly, then an instance uniformly."""
    classes = sorted(by_class)
    picks = rng.integers(0, len(classes), size=size)
    return np.array([
        by_class[classes[c]][rng.integers(0, len(by_class[classes[c]]))]
        for c in picks
    ])


def stage2_train_linear(model: enc.ConvEncoder, dataset: SynthDataset,
                        cfg: Stage2Config, threads: int = 1) -> LinearClassifier:
    """Cross-entropy training of a linear head on frozen pooled features."""
    feats = extract_features(model, dataset.train_pixels(), threads=threads)
    labels = dataset.train_labels()
    k = dataset.spec.num_classes
    d = feats.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _ROLE_STAGE2)))
    weight = ad.Tensor(np.zeros((d, k)), requires_grad=True)
    bias = ad.Tensor(np.zeros(k), requires_grad=True)
    opt = SgdMomentum(cfg.momentum, weight_decay=0.0)
    by_class = {int(c): np.nonzero(labels == c)[0] for c in np.unique(labels)}
    steps_per_epoch = int(np.ceil(len(labels) / cfg.batch_size))
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.milestones:
            lr *= cfg.gamma
        for _ in range(steps_per_epoch):
            if cfg.class_balanced:
                idx = class_balanced_draw(rng, by_class, cfg.batch_size)
            else:
                idx = rng.integers(0, len(labels), size=cfg.batch_size)
            x = feats[idx]
            y = labels[idx]
            onehot = np.zeros((len(idx), k))
            onehot[np.arange(len(idx)), y - 1] = 1.0
            weight.zero_grad()
            bias.zero_grad()
            logits = ad.add(ad.matmul(ad.Tensor(x), weight), bias)
            loss = ad.add(
                ad.mean_all(ad.logsumexp(logits)),
                ad.scale(ad.weighted_sum(logits, onehot / len(idx)), -1.0),
            )
            loss.backward()
            opt.step("w", weight.data, weight.grad, lr)
            opt.step("b", bias.data, bias.grad, lr)
    return LinearClassifier(weight=weight.data.copy(), bias=bias.data.copy())


def split_of_count(count: int) -> str:
    if count > 100:
        return "many"
    if count >= 20:
        return "medium"
    return "few"


def evaluate_splits(classifier: LinearClassifier, model: enc.ConvEncoder,
                    dataset: SynthDataset, threads: int = 1) -> SplitReport:
    """Top-1 accuracy overall and per cardinality split of the balanced test set."""
    feats = extract_features(model, dataset.test_pixels(), threads=threads)
    labels = dataset.test_labels()
    pred = classifier.predict(feats)
    per_class: dict[int, float] = {}
    split_acc: dict[str, list[float]] = {"many": [], "medium": [], "few": []}
    for k, count in enumerate(dataset.spec.class_counts, start=1):
        mask = labels == k
        if not mask.any():
            continue
        acc = float((pred[mask] == k).mean())
        per_class[k] = acc
        split_acc[split_of_count(count)].append(acc)
    overall = float(np.mean(list(per_class.values())))
    return SplitReport(
        overall=overall,
        many=float(np.mean(split_acc["many"])) if split_acc["many"] else float("nan"),
        medium=float(np.mean(split_acc["medium"])) if split_acc["medium"] else float("nan"),
        few=float(np.mean(split_acc["few"])) if split_acc["few"] else float("nan"),
        per_class=per_class,
    )
