"""Training loop, evaluation, cross-validation, ablations and sweep images."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .capsule import RoutingConfig
from .data import SampleRecord, dataset_arrays, stratified_kfold, train_val_split
from .losses import (LossBreakdown, attribute_loss, attribute_loss_terms, malignancy_kl_loss,
                     malignancy_regression_loss, reconstruction_loss, total_loss)
from .model import DEFAULT_DELTAS, XCapsConfig, XCapsModel, attribute_scores_to_scale
from .ratings import ATTRIBUTE_NAMES, confidence, within_one_correct

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_total", "train_lm", "train_la", "train_lr", "val_total")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.02
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 15
    max_epochs: int = 30
    seed: int = 0
    routing_mode: str = "sigmoid"
    routing_iterations: int = 3
    use_reconstruction: bool = True
    malignancy_mode: str = "distribution"
    gamma: float = 0.512
    beta: float = 1.0
    alpha: tuple[float, ...] = (1.0,) * 6
    conv_filters: int = 256
    dtype: str = "float32"
    k_folds: int = 5
    val_fraction: float = 0.10

    def __post_init__(self):
        if self.malignancy_mode not in ("distribution", "mean_regression"):
            raise ValueError(f"unknown malignancy mode {self.malignancy_mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and epoch count must be positive")
        self.alpha = tuple(float(a) for a in self.alpha)
        RoutingConfig(self.routing_mode, self.routing_iterations)

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.use_reconstruction else 0.0

    def model_config(self, **overrides) -> XCapsConfig:
        routing = RoutingConfig(self.routing_mode, self.routing_iterations)
        return XCapsConfig(conv_filters=self.conv_filters, attr_count=len(self.alpha),
                           routing=routing, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, nt.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# -- losses on a batch -----------------------------------------------------

def batch_loss(model: XCapsModel, batch: dict, cfg: TrainConfig):
    """Forward a batch; returns (total tensor, LossBreakdown, ForwardOutput)."""
    out = model.forward(batch["images"])
    l_a = attribute_loss(out.attr_scores, batch["attr_targets"], cfg.alpha)
    if cfg.malignancy_mode == "distribution":
        l_m = malignancy_kl_loss(out.malignancy_logits, batch["mal_targets"], cfg.beta)
    else:
        l_m = malignancy_regression_loss(out.malignancy_logits, batch["mal_means"], cfg.beta)
    total = l_m + l_a
    if cfg.use_reconstruction:
        l_r = reconstruction_loss(out.reconstruction, batch["images"], batch["masks"], cfg.effective_gamma)
        total = total + l_r
        l_r_val = l_r.item()
    else:
        l_r_val = 0.0
    per_attr = attribute_loss_terms(out.attr_scores.data, batch["attr_targets"], cfg.alpha)
    return total, total_loss(l_m, l_a, l_r_val, per_attr), out


def train_step(model: XCapsModel, batch: dict, cfg: TrainConfig, state: AdamState, lr: float):
    """Forward, backward and one Adam update; returns (LossBreakdown, gradients)."""
    model.zero_grad()
    total, parts, _ = batch_loss(model, batch, cfg)
    total.backward()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in model.params.items()}
    adam_step(model.params, grads, state, lr)
    return parts, grads


def _take(arrays: dict, idx) -> dict:
    return {k: v[idx] for k, v in arrays.items()}


def mean_breakdown(model: XCapsModel, arrays: dict, cfg: TrainConfig, batch_size: int = 64) -> LossBreakdown:
    n = len(arrays["images"])
    sums = np.zeros(3)
    per_attr = np.zeros(len(cfg.alpha))
    with nt.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            _, parts, _ = batch_loss(model, _take(arrays, idx), cfg)
            sums += len(idx) * np.array([parts.l_m, parts.l_a, parts.l_r])
            per_attr += len(idx) * np.asarray(parts.l_a_per_attribute)
    l_m, l_a, l_r = sums / n
    return total_loss(l_m, l_a, l_r, per_attr / n)


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: XCapsModel
    log: list[dict]
    best_epoch: int
    best_val: float


def train_fold(model: XCapsModel, train: list[SampleRecord], val: list[SampleRecord],
               cfg: TrainConfig, log_path=None) -> TrainResult:
    """Epoch loop with plateau lr decay and early stopping; returns the best-validation weights."""
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    if {r.id for r in train} & {r.id for r in val}:
        raise ValueError("train and validation splits overlap")
    dtype = model.dtype
    tr = dataset_arrays(train, dtype)
    va = dataset_arrays(val, dtype)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    lr = cfg.lr
    best_val, best_epoch, best_state = math.inf, -1, model.state_dict()
    since_best = since_plateau = 0
    rows: list[dict] = []
    n = len(train)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            parts, _ = train_step(model, _take(tr, idx), cfg, state, lr)
            sums += len(idx) * np.array([parts.l_m, parts.l_a, parts.l_r])
        l_m, l_a, l_r = sums / n
        val_total = mean_breakdown(model, va, cfg).total
        row = {"epoch": epoch, "lr": lr, "train_total": l_m + l_a + l_r, "train_lm": l_m,
               "train_la": l_a, "train_lr": l_r, "val_total": val_total}
        rows.append(row)
        log.info("epoch %d lr %.4g train %.5f val %.5f", epoch, lr, row["train_total"], val_total)
        if val_total < best_val:
            best_val, best_epoch, best_state = val_total, epoch, model.state_dict()
            since_best = since_plateau = 0
        else:
            since_best += 1
            since_plateau += 1
            if since_best >= cfg.early_stop_patience:
                break
            if since_plateau >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                since_plateau = 0
    model.load_state_dict(best_state)
    if log_path is not None:
        write_log(rows, log_path)
    return TrainResult(model, rows, best_epoch, best_val)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in LOG_COLUMNS})


# -- evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    attribute_accuracy: dict[str, float]
    malignancy_accuracy: float
    mean_confidence: float
    n_samples: int
    losses: dict
    samples: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"attribute_accuracy": self.attribute_accuracy,
                "malignancy_accuracy": self.malignancy_accuracy,
                "mean_confidence": self.mean_confidence, "n_samples": self.n_samples,
                "losses": self.losses, "samples": self.samples}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: XCapsModel, images, batch_size: int = 64) -> dict[str, np.ndarray]:
    vecs, logits = [], []
    with nt.no_grad():
        for start in range(0, len(images), batch_size):
            caps = model.encode(images[start:start + batch_size]).data
            vecs.append(caps.data.astype(np.float64))
            logits.append(model.head(caps).data.astype(np.float64))
    v = np.concatenate(vecs)
    return {"attr_vectors": v, "attr_scores": np.linalg.norm(v, axis=-1),
            "logits": np.concatenate(logits)}


def malignancy_classes(logits: np.ndarray, mode: str) -> np.ndarray:
    probs = _softmax_rows(logits)
    if mode == "distribution":
        return probs.argmax(axis=-1) + 1
    k = logits.shape[-1]
    expected = probs @ np.arange(1, k + 1)
    return np.clip(np.floor(expected + 0.5), 1, k).astype(int)


def attribute_classes(attr_scores: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(attribute_scores_to_scale(attr_scores) + 0.5), 1, 5).astype(int)


def score_predictions(records, attr_scores: np.ndarray, mal_pred: np.ndarray, attr_names=ATTRIBUTE_NAMES):
    """+/-1 accuracies for given predicted malignancy classes and attribute magnitudes."""
    attr_pred = attribute_classes(attr_scores)
    mal_ok = np.array([within_one_correct(int(p), r.malignancy_mean) for p, r in zip(mal_pred, records)])
    attr_ok = np.array([[within_one_correct(int(attr_pred[i, n]), r.ratings.attribute_means()[n])
                         for n in range(len(attr_names))] for i, r in enumerate(records)])
    return mal_ok, attr_ok


def evaluate(model: XCapsModel, records: list[SampleRecord], cfg: TrainConfig,
             include_samples: bool = True) -> EvalReport:
    arrays = dataset_arrays(records, model.dtype)
    pred = predict(model, arrays["images"])
    mal_pred = malignancy_classes(pred["logits"], cfg.malignancy_mode)
    mal_ok, attr_ok = score_predictions(records, pred["attr_scores"], mal_pred)
    probs = _softmax_rows(pred["logits"])
    conf = np.array([confidence(p) for p in probs])
    losses = mean_breakdown(model, arrays, cfg).as_dict()
    samples = []
    if include_samples:
        for i, rec in enumerate(records):
            samples.append({
                "id": rec.id,
                "malignancy_pred": int(mal_pred[i]),
                "malignancy_mean": rec.malignancy_mean,
                "malignancy_probs": probs[i].tolist(),
                "attribute_scores": dict(zip(ATTRIBUTE_NAMES, attribute_scores_to_scale(pred["attr_scores"][i]).tolist())),
                "contributions": model.contribution_report(pred["attr_vectors"][i]).tolist(),
                "confidence": float(conf[i]),
                "correct": bool(mal_ok[i]),
            })
    return EvalReport(
        attribute_accuracy={name: float(attr_ok[:, n].mean()) for n, name in enumerate(ATTRIBUTE_NAMES)},
        malignancy_accuracy=float(mal_ok.mean()),
        mean_confidence=float(conf.mean()),
        n_samples=len(records),
        losses=losses,
        samples=samples,
    )


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Sample-weighted pooled metrics across folds."""
    n = sum(r.n_samples for r in reports)
    w = [r.n_samples / n for r in reports]
    return {
        "n_samples": n,
        "malignancy_accuracy": float(sum(wi * r.malignancy_accuracy for wi, r in zip(w, reports))),
        "mean_confidence": float(sum(wi * r.mean_confidence for wi, r in zip(w, reports))),
        "attribute_accuracy": {name: float(sum(wi * r.attribute_accuracy[name] for wi, r in zip(w, reports)))
                               for name in ATTRIBUTE_NAMES},
    }


# -- cross-validation and ablations ----------------------------------------

def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class FoldRun:
    fold: int
    report: EvalReport
    train: TrainResult
    test_ids: list[str]


def run_fold(records, folds, fold: int, cfg: TrainConfig, out_dir=None) -> FoldRun:
    by_fold = folds.assignments
    test = [r for r in records if by_fold[r.id] == fold]
    rest = [r for r in records if by_fold[r.id] != fold]
    seed = fold_seed(cfg.seed, fold)
    train, val = train_val_split(rest, cfg.val_fraction, seed)
    model = XCapsModel.build(cfg.model_config(), seed=seed, dtype=np.dtype(cfg.dtype))
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"fold{fold}_log.csv"
    result = train_fold(model, train, val, replace(cfg, seed=seed), log_path)
    report = evaluate(result.model, test, cfg)
    if out_dir is not None:
        result.model.save(out_dir / f"fold{fold}.xcap")
        report.write(out_dir / f"fold{fold}_report.json")
    return FoldRun(fold, report, result, [r.id for r in test])


def cross_validate(records, cfg: TrainConfig, out_dir=None, max_folds: int | None = None):
    folds = stratified_kfold(records, cfg.k_folds, cfg.seed, cfg.val_fraction)
    runs = []
    for fold in range(cfg.k_folds if max_folds is None else min(max_folds, cfg.k_folds)):
        log.info("fold %d/%d", fold + 1, cfg.k_folds)
        runs.append(run_fold(records, folds, fold, cfg, out_dir))
    aggregate = aggregate_reports([r.report for r in runs])
    if out_dir is not None:
        summary = {"config": cfg.to_dict(), "aggregate": aggregate,
                   "folds": [{"fold": r.fold, "n_samples": r.report.n_samples,
                              "malignancy_accuracy": r.report.malignancy_accuracy,
                              "attribute_accuracy": r.report.attribute_accuracy,
                              "best_epoch": r.train.best_epoch} for r in runs]}
        Path(out_dir, "cv_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return runs, aggregate, folds


ABLATIONS = (
    ("base", {}),
    ("mean_regression", {"malignancy_mode": "mean_regression"}),
    ("no_reconstruction", {"use_reconstruction": False}),
    ("routing_softmax", {"routing_mode": "softmax"}),
)
# full-scale malignancy accuracies reported for the original data; context only
REFERENCE_ACCURACY = {"base": 0.8639, "mean_regression": 0.8309,
                      "no_reconstruction": 0.8030, "routing_softmax": 0.8069}


def ablation_suite(records, base: TrainConfig, out_dir=None, max_folds: int | None = 1):
    """Base configuration plus the three single-change ablations on identical folds."""
    rows = []
    fold_specs = []
    for name, change in ABLATIONS:
        cfg = replace(base, **change)
        sub_dir = Path(out_dir) / name if out_dir is not None else None
        runs, agg, folds = cross_validate(records, cfg, sub_dir, max_folds)
        fold_specs.append(folds.assignments)
        rows.append({"config": name, "malignancy_accuracy": agg["malignancy_accuracy"],
                     "mean_confidence": agg["mean_confidence"],
                     **{f"acc_{k}": v for k, v in agg["attribute_accuracy"].items()},
                     "reference_full_scale": REFERENCE_ACCURACY[name],
                     "n_samples": agg["n_samples"]})
    if any(f != fold_specs[0] for f in fold_specs):
        raise RuntimeError("ablation runs used different fold assignments")
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_table(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# -- reconstruction sweeps -------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM of an image with values in [0, 1]."""
    pix = np.clip(np.floor(255.0 * np.asarray(image, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def sweep_grid(model: XCapsModel, attr_vectors, attr_idx: int, deltas=DEFAULT_DELTAS) -> np.ndarray:
    """Rows = capsule dimensions, columns = deltas, each tile a decoded patch."""
    size = model.config.image_size
    rows = []
    for d in range(model.config.attr_dim):
        with nt.no_grad():
            tiles = model.perturb_and_decode(attr_vectors, attr_idx, d, deltas)
        rows.append(np.concatenate(tiles, axis=1))
    grid = np.concatenate(rows, axis=0)
    assert grid.shape == (size * model.config.attr_dim, size * len(deltas))
    return grid


def emit_sweep_images(model: XCapsModel, sample: SampleRecord, out_dir, deltas=DEFAULT_DELTAS) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with nt.no_grad():
        v = model.encode(sample.image[None]).data.data[0]
    names = ATTRIBUTE_NAMES if model.config.attr_count == len(ATTRIBUTE_NAMES) else \
        [f"attr{n}" for n in range(model.config.attr_count)]
    paths = []
    for n, name in enumerate(names):
        path = out_dir / f"{sample.id}_sweep_{name}.pgm"
        write_pgm(path, sweep_grid(model, v, n, deltas))
        paths.append(path)
    return paths
