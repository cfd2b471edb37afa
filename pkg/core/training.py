"""
Two-stage protocol: self-supervised hop pretraining, then a linear probe on the
frozen global descriptor. Also the supervised attention baseline, evaluation and
the ablation sweeps.

Per-sample work (normalise, augment, ground truth, forward, backward) runs on its own
tape and may run on worker threads; gradients are always reduced in batch order
before the single optimizer step, so the thread count never changes results.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
import pandas as pd

from core.autodiff import OptimizerState, ParamStore, Tape, grad_check, sgd_step
from core.checkpoint import PROBE_PARAMS, Checkpoint
from core.config import ModelConfig, TrainConfig, preset, with_updates
from core.errors import ConfigError, DataError, NonFiniteError
from core.geometry import CLASS_NAMES, PointCloud, SyntheticSpec, augment, normalize_unit_sphere, sample_synthetic
from core.metrics import classification_accuracy, confusion, hop_accuracy, hop_counts
from core.model import init_params, linear, model_forward
from core.partition import ground_truth, voxelize
from core.state_store import Dataset

logger = logging.getLogger(__name__)

SIGMA2_SWEEP = (0.2, 0.5, 1.0, 2.0, 5.0)
PROBE_FRACTIONS = (0.05, 0.2, 1.0)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    hop_acc: float | None
    lr: float


@dataclass
class Metrics:
    hop_accuracy: float | None = None
    per_layer: list[float] = field(default_factory=list)
    classification_accuracy: float | None = None
    mean_loss: float | None = None
    loss_curve: list[EpochRecord] = field(default_factory=list)
    confusion: np.ndarray | None = None
    n_samples: int = 0

    def summary(self) -> dict:
        return {"hop_acc": self.hop_accuracy, "per_layer": self.per_layer,
                "cls_acc": self.classification_accuracy, "mean_loss": self.mean_loss,
                "n_samples": self.n_samples}


@dataclass
class _SampleResult:
    loss: float
    grads: dict[str, np.ndarray]
    counts: np.ndarray | None


def metrics_frame(metrics: Metrics) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in metrics.loss_curve], columns=["epoch", "loss", "hop_acc", "lr"])


def _require(dataset: Dataset):
    if len(dataset) == 0:
        raise DataError("dataset is empty")


def _prepare(cloud: PointCloud, rng: np.random.Generator | None, train_config: TrainConfig | None) -> PointCloud:
    cloud = normalize_unit_sphere(cloud)
    if rng is not None and train_config is not None and train_config.use_augment:
        cloud = augment(cloud, train_config.augment, rng)
    return cloud


# --- per-sample steps

def _selfsup_sample(sample_id: str, cloud: PointCloud, seed: int, store: ParamStore,
                    config: ModelConfig, train_config: TrainConfig) -> _SampleResult:
    cloud = _prepare(cloud, np.random.default_rng(seed), train_config)
    # ground truth is recomputed on the augmented cloud
    partition, hop = ground_truth(cloud, config.split, config.scale_factor)
    tape = Tape()
    try:
        out = model_forward(cloud, partition, hop, config, store, mode="train", tape=tape)
        grads = tape.gradients(out.loss_tensor)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, f"sample {sample_id}") from exc
    return _SampleResult(out.loss, grads, hop_counts(out.hop_logits, hop))


def _supervised_sample(sample_id: str, cloud: PointCloud, seed: int, store: ParamStore,
                       config: ModelConfig, train_config: TrainConfig) -> _SampleResult:
    rng = np.random.default_rng(seed)
    cloud = _prepare(cloud, rng, train_config)
    tape = Tape()
    try:
        leaves = store.bind(tape)
        out = model_forward(cloud, voxelize(cloud, config.split), None, config, leaves, tape=tape)
        x = tape.dropout(out.descriptor_tensor, train_config.dropout, True, rng)
        loss = tape.cross_entropy_logits(linear(tape, x, leaves["probe.W"], leaves["probe.b"]), [cloud.label])
        grads = tape.gradients(loss)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, f"sample {sample_id}") from exc
    return _SampleResult(float(loss.data), grads, None)


def _fit(dataset: Dataset, store: ParamStore, config: ModelConfig, train_config: TrainConfig,
         step_fn) -> list[EpochRecord]:
    """Shared minibatch loop: seeded shuffling, mean batch gradient, cosine SGD."""
    n, batch = len(dataset), train_config.batch_size
    steps = max(1, train_config.epochs * math.ceil(n / batch))
    state = OptimizerState(train_config.lr, steps, train_config.momentum, train_config.weight_decay)
    rng = np.random.default_rng(train_config.seed)
    curve: list[EpochRecord] = []
    with ThreadPoolExecutor(max_workers=train_config.threads) as pool:
        for epoch in range(train_config.epochs):
            order = rng.permutation(n)
            seeds = rng.integers(0, 2**31 - 1, size=n)
            lr = state.lr()
            losses, counts = [], None
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                work = [partial(step_fn, dataset.ids[i], dataset.clouds[i], int(seeds[i]), store, config, train_config)
                        for i in idx]
                results = list(pool.map(lambda f: f(), work))
                for res in results:
                    store.accumulate(res.grads, 1.0 / len(idx))
                    losses.append(res.loss)
                    if res.counts is not None:
                        counts = res.counts if counts is None else counts + res.counts
                logger.debug("epoch %d batch %d: loss %.5f", epoch, start // batch, np.mean(losses[-len(idx):]))
                sgd_step(store, state)
            hop_acc = hop_accuracy(counts)[0] if counts is not None else None
            curve.append(EpochRecord(epoch, float(np.mean(losses)), hop_acc, lr))
            logger.info("epoch %d/%d loss=%.5f hop_acc=%s lr=%.5f", epoch + 1, train_config.epochs,
                        curve[-1].loss, "n/a" if hop_acc is None else f"{hop_acc:.4f}", lr)
    return curve


def _curve_meta(curve: list[EpochRecord]) -> list[dict]:
    return [asdict(r) for r in curve]


# --- stages

def pretrain(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig) -> Checkpoint:
    _require(dataset)
    store = init_params(model_config)
    logger.info("pretraining %d parameters on %d clouds", len(store), len(dataset))
    curve = _fit(dataset, store, model_config, train_config, _selfsup_sample)
    meta = {"stage": "pretrain", "epochs": train_config.epochs, "seed": train_config.seed,
            "final_loss": curve[-1].loss if curve else None, "curve": _curve_meta(curve)}
    return Checkpoint(model_config, store.snapshot(), meta)


def train_supervised(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig) -> Checkpoint:
    """Backbone and linear head trained end to end with cross-entropy only."""
    _require(dataset)
    store = init_params(model_config)
    store.add("probe.W", (model_config.descriptor_size, dataset.n_classes), model_config.descriptor_size)
    store.add("probe.b", (1, dataset.n_classes), model_config.descriptor_size)
    curve = _fit(dataset, store, model_config, train_config, _supervised_sample)
    meta = {"stage": "supervised", "epochs": train_config.epochs, "seed": train_config.seed,
            "final_loss": curve[-1].loss if curve else None, "curve": _curve_meta(curve)}
    return Checkpoint(model_config, store.snapshot(), meta)


def _descriptor(cloud: PointCloud, store: ParamStore, config: ModelConfig) -> np.ndarray:
    cloud = normalize_unit_sphere(cloud)
    return model_forward(cloud, voxelize(cloud, config.split), None, config, store, mode="eval").descriptor


def compute_descriptors(ckpt: Checkpoint, dataset: Dataset, threads: int = 1) -> np.ndarray:
    store = ParamStore.from_arrays(ckpt.backbone(), seed=ckpt.config.seed)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda c: _descriptor(c, store, ckpt.config), dataset.clouds))
    return np.vstack(rows)


def fraction_size(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"train fraction must be in (0, 1], got {fraction}")
    return max(1, math.ceil(round(fraction * n, 9)))


def _predict(params: dict[str, np.ndarray], descriptors: np.ndarray) -> np.ndarray:
    return np.argmax(descriptors @ params["probe.W"] + params["probe.b"], axis=1)


def linear_probe(ckpt: Checkpoint, dataset: Dataset, train_config: TrainConfig,
                 eval_set: Dataset | None = None) -> tuple[Checkpoint, Metrics]:
    """Train `probe.W`/`probe.b` on frozen descriptors; the backbone is never updated.

    Accuracy is measured on `eval_set` when given, otherwise on the probe's training
    samples. Returns the checkpoint extended with the probe head.
    """
    _require(dataset)
    if ckpt.has_probe and ckpt.n_classes != dataset.n_classes:
        raise DataError(f"class count mismatch: checkpoint has {ckpt.n_classes}, dataset has {dataset.n_classes}")
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= dataset.n_classes:
        raise DataError("class count mismatch: labels outside the dataset's classes")

    rng = np.random.default_rng(train_config.seed)
    m = fraction_size(train_config.train_fraction, len(dataset))
    chosen = np.sort(rng.choice(len(dataset), size=m, replace=False))
    desc = compute_descriptors(ckpt, dataset.subset(chosen), train_config.threads)
    labels = labels[chosen]

    store = ParamStore.from_arrays(ckpt.backbone(), seed=train_config.seed)
    store.freeze(store.names())
    d = desc.shape[1]
    store.add("probe.W", (d, dataset.n_classes), d)
    store.add("probe.b", (1, dataset.n_classes), d)
    steps = max(1, train_config.probe_epochs * math.ceil(m / train_config.batch_size))
    state = OptimizerState(train_config.lr, steps, train_config.momentum, train_config.weight_decay)
    curve: list[EpochRecord] = []
    for epoch in range(train_config.probe_epochs):
        lr = state.lr()
        order = rng.permutation(m)
        losses = []
        for start in range(0, m, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            tape = Tape()
            leaves = store.bind(tape)
            x = tape.dropout(tape.constant(desc[idx]), train_config.dropout, True, rng)
            loss = tape.cross_entropy_logits(linear(tape, x, leaves["probe.W"], leaves["probe.b"]), labels[idx])
            store.accumulate(tape.gradients(loss))
            sgd_step(store, state)
            losses.append(float(loss.data))
        curve.append(EpochRecord(epoch, float(np.mean(losses)), None, lr))
        logger.debug("probe epoch %d loss=%.5f", epoch, curve[-1].loss)

    head = {n: store.params[n].copy() for n in PROBE_PARAMS}
    if eval_set is not None:
        eval_desc, eval_labels = compute_descriptors(ckpt, eval_set, train_config.threads), eval_set.labels
    else:
        eval_desc, eval_labels = desc, labels
    pred = _predict(head, eval_desc)
    metrics = Metrics(classification_accuracy=classification_accuracy(eval_labels, pred),
                      loss_curve=curve, confusion=confusion(eval_labels, pred, dataset.n_classes),
                      n_samples=m)
    logger.info("linear probe on %d/%d samples: accuracy %.4f", m, len(dataset), metrics.classification_accuracy)
    meta = {**ckpt.metadata, "probe": {"epochs": train_config.probe_epochs, "samples": m,
                                       "fraction": train_config.train_fraction, "seed": train_config.seed}}
    return Checkpoint(ckpt.config, {**ckpt.backbone(), **head}, meta), metrics


def _evaluate_sample(cloud: PointCloud, store: ParamStore, config: ModelConfig):
    cloud = normalize_unit_sphere(cloud)
    partition, hop = ground_truth(cloud, config.split, config.scale_factor)
    out = model_forward(cloud, partition, hop, config, store, mode="eval")
    return out.loss, hop_counts(out.hop_logits, hop), out.descriptor


def evaluate(ckpt: Checkpoint, dataset: Dataset, threads: int = 1) -> Metrics:
    """Hop accuracy over valid pairs and, with a probe head, classification accuracy."""
    _require(dataset)
    store = ParamStore.from_arrays(ckpt.backbone(), seed=ckpt.config.seed)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda c: _evaluate_sample(c, store, ckpt.config), dataset.clouds))
    counts = sum(r[1] for r in rows)
    hop_acc, per_layer = hop_accuracy(counts)
    metrics = Metrics(hop_accuracy=hop_acc, per_layer=per_layer,
                      mean_loss=float(np.mean([r[0] for r in rows])), n_samples=len(dataset))
    if ckpt.has_probe:
        if ckpt.n_classes != dataset.n_classes:
            raise DataError(f"class count mismatch: checkpoint has {ckpt.n_classes}, dataset has {dataset.n_classes}")
        pred = _predict(ckpt.params, np.vstack([r[2] for r in rows]))
        metrics.classification_accuracy = classification_accuracy(dataset.labels, pred)
        metrics.confusion = confusion(dataset.labels, pred, dataset.n_classes)
    return metrics


# --- sweeps

def ablate_sigma(train_set: Dataset, test_set: Dataset, values, model_config: ModelConfig,
                 train_config: TrainConfig) -> pd.DataFrame:
    rows = []
    for sigma2 in values:
        cfg = with_updates(model_config, sigma2=float(sigma2))
        logger.info("sigma2=%g", sigma2)
        probed, _ = linear_probe(pretrain(train_set, cfg, train_config), train_set, train_config)
        m = evaluate(probed, test_set, train_config.threads)
        rows.append({"sigma2": float(sigma2), "hop_acc": m.hop_accuracy, "cls_acc": m.classification_accuracy})
    return pd.DataFrame(rows, columns=["sigma2", "hop_acc", "cls_acc"])


def ablate_attention(train_set: Dataset, test_set: Dataset, model_config: ModelConfig,
                     train_config: TrainConfig) -> pd.DataFrame:
    rows = []
    sa = with_updates(model_config, lambdas=(0,) * model_config.layers)
    m = evaluate(train_supervised(train_set, sa, train_config), test_set, train_config.threads)
    # its hop head never sees the hop loss
    rows.append({"setting": "sa_supervised", "hop_acc": None, "cls_acc": m.classification_accuracy})
    for setting, loss_mode in (("hga_last_layer", "last"), ("hga_all_layers", "all")):
        cfg = with_updates(model_config, loss_mode=loss_mode)
        probed, _ = linear_probe(pretrain(train_set, cfg, train_config), train_set, train_config)
        m = evaluate(probed, test_set, train_config.threads)
        rows.append({"setting": setting, "hop_acc": m.hop_accuracy, "cls_acc": m.classification_accuracy})
    return pd.DataFrame(rows, columns=["setting", "hop_acc", "cls_acc"])


def probe_fractions(ckpt: Checkpoint, train_set: Dataset, test_set: Dataset, fractions,
                    train_config: TrainConfig) -> pd.DataFrame:
    rows = []
    for fraction in fractions:
        cfg = with_updates(train_config, train_fraction=float(fraction))
        _, m = linear_probe(ckpt, train_set, cfg, test_set)
        rows.append({"fraction": float(fraction), "samples": m.n_samples, "cls_acc": m.classification_accuracy})
    return pd.DataFrame(rows, columns=["fraction", "samples", "cls_acc"])


def gradient_check(model_config: ModelConfig | None = None, n_points: int = 64, seed: int = 1,
                   eps: float = 1e-4, max_coords: int | None = None) -> float:
    """Central-difference check of the full self-supervised loss on one synthetic cloud."""
    if model_config is None:
        model_config = preset("tiny")[0]
    model_config = with_updates(model_config, seed=seed)
    spec = SyntheticSpec(class_id=seed % len(CLASS_NAMES), n_points=n_points, seed=seed)
    cloud = normalize_unit_sphere(sample_synthetic(spec))
    partition, hop = ground_truth(cloud, model_config.split, model_config.scale_factor)
    store = init_params(model_config)

    def loss_fn(tape, leaves):
        return model_forward(cloud, partition, hop, model_config, leaves, tape=tape).loss_tensor

    return grad_check(loss_fn, store, eps=eps, max_coords=max_coords, rng=np.random.default_rng(seed))
