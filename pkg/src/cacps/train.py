"""Semi-supervised training of two independent CACPS models.

A CACPS model is a pair of identically shaped networks with different
initial weights.  Every step draws a batch from the training pool, gives
each sample a Fourier-augmented copy whose partner is another random pool
member, and minimises

    L = dice(P_O^a, G) + dice(P_O^b, G) + beta * (L_a + L_b)

where the dice terms use the labeled members of the batch only.  Both
networks are updated with AdamW under an epoch-level cosine schedule.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gridmath as gm
from . import losses, phantom, segnet, spectral
from .errors import CacpsError

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "step",
    "model_id",
    "L_s",
    "L_cacps",
    "L_total",
    "lr",
    "mean_V",
    "val_dice_LV",
    "val_dice_MYO",
    "val_dice_RV",
    "val_dice_avg",
)
CLASS_NAMES = ("LV", "MYO", "RV")


@dataclass
class Seeds:
    data: int = 0
    net1: int = 1
    net2: int = 2
    net3: int = 3
    net4: int = 4
    shuffle: int = 5


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are sized for a CPU run at 64x64."""

    lr_max: float = 1e-3
    lr_min: float = 1e-5
    epochs: int = 60
    batch_size: int = 8
    beta: float = 1.5
    weight_decay: float = 1e-2
    lambda_max: float = 1.0
    mask_ratio: float = 0.1
    mix_mode: str = "convex-low-freq"
    grad_through_variance: bool = False
    augment_labeled: bool = True
    augment_unlabeled: bool = True
    labeled_only: bool = False
    labeled_batch_size: int = 0
    beta_rampup_epochs: float = 0.0
    steps_per_epoch: int = 0
    models: list = field(default_factory=lambda: [1, 2])
    seeds: Seeds = field(default_factory=Seeds)
    data_dir: str = "data"

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        self.validate()

    @classmethod
    def paper_defaults(cls, **overrides) -> "TrainConfig":
        """Values reported for the full-size experiments (large GPU backbones)."""
        base = dict(lr_max=1e-5, lr_min=1e-7, epochs=100, batch_size=16, beta=1.5)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        def bad(msg):
            raise CacpsError("config", msg)

        if not (self.lr_min > 0):
            bad(f"lr_min must be > 0, got {self.lr_min}")
        if not (self.lr_max >= self.lr_min):
            bad(f"lr_max ({self.lr_max}) must be >= lr_min ({self.lr_min})")
        if int(self.epochs) < 1:
            bad("epochs must be >= 1")
        if int(self.batch_size) < 2:
            bad("batch_size must be >= 2")
        if not (self.beta >= 0):
            bad("beta must be >= 0")
        if not (self.weight_decay >= 0):
            bad("weight_decay must be >= 0")
        if not 0.0 <= self.lambda_max <= 1.0:
            bad("lambda_max must lie in [0, 1]")
        if not 0 <= int(self.labeled_batch_size) <= int(self.batch_size):
            bad("labeled_batch_size must lie in [0, batch_size]")
        if not (self.beta_rampup_epochs >= 0):
            bad("beta_rampup_epochs must be >= 0")
        if int(self.steps_per_epoch) < 0:
            bad("steps_per_epoch must be >= 0")
        if not self.models or any(m not in (1, 2) for m in self.models):
            bad(f"models must be a non-empty subset of [1, 2], got {self.models}")
        spectral.MixConfig(0.0, self.mask_ratio, self.mix_mode)

    def net_seeds(self, model_id: int) -> tuple[int, int]:
        return (self.seeds.net1, self.seeds.net2) if model_id == 1 else (self.seeds.net3, self.seeds.net4)

    def to_flat(self) -> dict:
        flat = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                flat.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                flat[k] = v
        return flat

    @classmethod
    def flat_keys(cls) -> set[str]:
        return set(cls().to_flat())

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        unknown = set(flat) - cls.flat_keys()
        if unknown:
            raise CacpsError("config", f"unknown training keys: {sorted(unknown)}")
        kwargs: dict = {}
        seeds = {}
        for k, v in flat.items():
            if k.startswith("seeds."):
                seeds[k.split(".", 1)[1]] = int(v)
            else:
                kwargs[k] = v
        types = {f.name: f.type for f in fields(cls)}
        for k, v in list(kwargs.items()):
            kwargs[k] = _coerce(k, v, types[k])
        return cls(**kwargs, seeds=Seeds(**seeds))


def _coerce(key: str, value, typ: str):
    try:
        if typ == "float":
            return float(value)
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if typ == "list":
            return [int(x) for x in value]
        return str(value)
    except (TypeError, ValueError):
        raise CacpsError("config", f"bad value for {key}: {value!r}") from None


# --- optimisation ---------------------------------------------------------


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[gm.Tensor]) -> "AdamWState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(
    params: Sequence[gm.Tensor],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay Adam update; rebinds each ``param.data``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise CacpsError("shape", "params, grads and optimiser state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise CacpsError("shape", f"param {p.shape} vs grad {np.shape(g)}")
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        decayed = p.data * (1 - lr * weight_decay)
        p.data = decayed - lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + eps)


def sigmoid_rampup(progress: float) -> float:
    """``exp(-5 (1 - t)^2)`` for ``t = clip(progress, 0, 1)``."""
    t = min(max(progress, 0.0), 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


def beta_at(cfg: TrainConfig, epoch_progress: float) -> float:
    if cfg.beta_rampup_epochs <= 0:
        return cfg.beta
    return cfg.beta * sigmoid_rampup(epoch_progress / cfg.beta_rampup_epochs)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise CacpsError("config", f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


# --- one step -------------------------------------------------------------


def compute_losses(
    nets: Sequence[segnet.SegNetParams],
    images: np.ndarray,
    augmented: np.ndarray,
    onehot: np.ndarray,
    labeled: np.ndarray,
    beta: float,
    grad_through_variance: bool = False,
) -> tuple[gm.Tensor, losses.LossReport]:
    """Total loss (on the tape) and its report for one batch.

    ``images`` and ``augmented`` are ``(N, 1, H, W)``, ``onehot`` holds the
    ground truth of the samples flagged in the boolean ``labeled`` array.
    With ``beta == 0`` the cross term cannot contribute a gradient, so it
    is evaluated off the tape and the supervised term only ever sees the
    labeled samples.
    """
    net_a, net_b = nets
    lab = np.flatnonzero(labeled)
    g = onehot[lab] if lab.size else None

    def supervised(p_a, p_b):
        if g is None:
            return gm.Tensor(0.0), (0.0,) * 3
        t_a, t_b = losses.dice_terms(p_a, g), losses.dice_terms(p_b, g)
        fg = list(losses.FOREGROUND)
        terms = tuple(float(x) for x in ((t_a.data + t_b.data) / 2)[fg])
        return losses.dice_loss(p_a, g) + losses.dice_loss(p_b, g), terms

    if beta == 0 and not grad_through_variance:
        if lab.size:
            l_s, terms = supervised(
                segnet.predict_probs(net_a, images[lab]), segnet.predict_probs(net_b, images[lab])
            )
        else:
            l_s, terms = supervised(None, None)
        with gm.no_grad():
            a = losses.build_bundle(net_a, images, augmented)
            b = losses.build_bundle(net_b, images, augmented)
            l_c = losses.cacps_pair_loss(a, b)
    else:
        a = losses.build_bundle(net_a, images, augmented)
        b = losses.build_bundle(net_b, images, augmented)
        l_c = losses.cacps_pair_loss(a, b, grad_through_variance)
        l_s, terms = supervised(gm.take(a.P_O, lab), gm.take(b.P_O, lab)) if lab.size else supervised(None, None)
    total = losses.total_loss(l_s, l_c, beta)
    mean_v = 0.5 * (float(a.V.data.mean()) + float(b.V.data.mean()))
    report = losses.LossReport(l_s.item(), l_c.item(), total.item(), terms, mean_v)
    return total, report


# --- data -----------------------------------------------------------------


@dataclass
class Pool:
    images: np.ndarray  # (P, H, W)
    masks: np.ndarray  # (P, H, W), zeros where unlabeled
    labeled: np.ndarray  # (P,) bool
    sample_ids: list[str]

    @classmethod
    def from_entries(cls, manifest: phantom.DatasetManifest, entries) -> "Pool":
        samples = [manifest.load(e) for e in entries]
        h, w = manifest.H, manifest.W
        images = np.stack([s.image for s in samples]) if samples else np.zeros((0, h, w))
        masks = np.stack(
            [s.mask if s.mask is not None else np.zeros((h, w), np.uint8) for s in samples]
        ) if samples else np.zeros((0, h, w), np.uint8)
        return cls(images, masks, np.array([s.labeled for s in samples], bool), [s.sample_id for s in samples])

    def __len__(self) -> int:
        return len(self.sample_ids)


def training_pool(manifest: phantom.DatasetManifest, cfg: TrainConfig) -> Pool:
    entries = manifest.select("train", True if cfg.labeled_only else None)
    if not any(e.labeled for e in entries):
        raise CacpsError("data", "training pool has no labeled samples")
    return Pool.from_entries(manifest, entries)


def augment_for_batch(pool: Pool, idx: np.ndarray, cfg: TrainConfig, key: Sequence[int]) -> np.ndarray:
    """Augmented copies of ``pool.images[idx]``; randomness per sample from ``key + [k]``."""
    out = np.empty((len(idx),) + pool.images.shape[1:])
    n = len(pool)
    for k, i in enumerate(idx):
        img = pool.images[i]
        want = cfg.augment_labeled if pool.labeled[i] else cfg.augment_unlabeled
        rng = np.random.default_rng(list(key) + [k])
        j = int(rng.integers(n - 1)) if n > 1 else 0
        if n > 1 and j >= i:
            j += 1
        lam = float(rng.uniform(0.0, cfg.lambda_max))
        if not want:
            out[k] = img
            continue
        out[k] = spectral.fourier_augment(img, pool.images[j], spectral.MixConfig(lam, cfg.mask_ratio, cfg.mix_mode))
    return out


def _index_stream(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    chunks, have = [], 0
    while have < count:
        chunks.append(rng.permutation(n))
        have += n
    return np.concatenate(chunks)[:count] if chunks else np.zeros(0, np.intp)


class BatchSampler:
    """Pool indices per step.

    With ``labeled_batch_size == 0`` batches are drawn from the whole pool.
    Otherwise each batch holds that many labeled samples (from their own
    stream) followed by unlabeled ones (from a second stream); a pool that
    is entirely labeled always uses the labeled stream, so a labeled-only
    run sees the same labeled batches as a mixed run with equal seeds.
    """

    def __init__(self, pool: Pool, cfg: TrainConfig, model_id: int):
        self.bs = int(cfg.batch_size)
        self.lab = np.flatnonzero(pool.labeled)
        self.unl = np.flatnonzero(~pool.labeled)
        self.n = len(pool)
        k = int(cfg.labeled_batch_size)
        if not len(self.unl):
            k = self.bs if cfg.labeled_only else (k or self.bs)
            self.k = min(k, self.bs)
        else:
            self.k = k
        seed = cfg.seeds.shuffle
        self.rng_pool = np.random.default_rng([seed, model_id, 0])
        self.rng_lab = np.random.default_rng([seed, model_id, 1])
        self.rng_unl = np.random.default_rng([seed, model_id, 2])

    def epoch(self, steps: int) -> list[np.ndarray]:
        if self.k == 0:
            order = _index_stream(self.rng_pool, self.n, steps * self.bs)
            return [order[i * self.bs : (i + 1) * self.bs] for i in range(steps)]
        n_unl = (self.bs - self.k) if len(self.unl) else 0
        lab = self.lab[_index_stream(self.rng_lab, len(self.lab), steps * self.k)]
        unl = self.unl[_index_stream(self.rng_unl, len(self.unl), steps * n_unl)] if n_unl else None
        out = []
        for i in range(steps):
            parts = [lab[i * self.k : (i + 1) * self.k]]
            if n_unl:
                parts.append(unl[i * n_unl : (i + 1) * n_unl])
            out.append(np.concatenate(parts))
        return out


# --- inference / evaluation -------------------------------------------------


def ensemble_predict(
    model1: Sequence[segnet.SegNetParams],
    model2: Sequence[segnet.SegNetParams] | None,
    images: np.ndarray,
    chunk: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """Average softmax maps within each model, then across models; argmax mask."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    models = [list(model1)] + ([list(model2)] if model2 is not None else [])
    shapes = {tuple(p.shapes) for nets in models for p in nets}
    if len(shapes) != 1:
        raise CacpsError("checkpoint", "networks in the ensemble have different layer shapes")
    per_model = []
    with gm.no_grad():
        for nets in models:
            acc = np.zeros((images.shape[0], segnet.NUM_CLASSES) + images.shape[2:])
            for start in range(0, images.shape[0], chunk):
                sl = slice(start, start + chunk)
                acc[sl] = sum(segnet.predict_probs(p, images[sl]).data for p in nets) / len(nets)
            per_model.append(acc)
    probs = sum(per_model) / len(per_model)
    return probs, np.argmax(probs, axis=1)


@dataclass
class DiceResult:
    per_sample: list[dict]
    per_class: dict[str, float]
    average: float

    def summary_row(self) -> dict:
        return {f"dice_{c}": self.per_class[c] for c in CLASS_NAMES} | {"dice_avg": self.average}


def hard_dice(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    a, b = pred == cls, truth == cls
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * int((a & b).sum()) / total


def evaluate_dice(predictions: Sequence[np.ndarray], truths: Sequence[np.ndarray | None], sample_ids=None) -> DiceResult:
    """Per-class hard dice averaged over samples; ``average`` is the mean of the three class scores."""
    if len(predictions) != len(truths):
        raise CacpsError("data", "prediction and ground-truth counts differ")
    if not len(truths):
        raise CacpsError("data", "nothing to evaluate")
    sample_ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(truths))]
    rows = []
    for sid, p, t in zip(sample_ids, predictions, truths):
        if t is None:
            raise CacpsError("data", f"{sid}: no ground-truth mask")
        if np.shape(p) != np.shape(t):
            raise CacpsError("data", f"{sid}: prediction {np.shape(p)} vs mask {np.shape(t)}")
        row = {"sample_id": sid}
        for c, name in enumerate(CLASS_NAMES, start=1):
            row[f"dice_{name}"] = hard_dice(np.asarray(p), np.asarray(t), c)
        row["dice_avg"] = float(np.mean([row[f"dice_{n}"] for n in CLASS_NAMES]))
        rows.append(row)
    per_class = {n: float(np.mean([r[f"dice_{n}"] for r in rows])) for n in CLASS_NAMES}
    return DiceResult(rows, per_class, float(np.mean(list(per_class.values()))))


# --- training loop --------------------------------------------------------


@dataclass
class TrainResult:
    model_id: int
    nets: tuple[segnet.SegNetParams, segnet.SegNetParams]
    rows: list[dict]
    checkpoint_dir: Path | None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def checkpoint_paths(out_dir, model_id: int) -> tuple[Path, Path]:
    d = Path(out_dir) / f"model{model_id}"
    return d / "net_a.ckpt", d / "net_b.ckpt"


def _save_pair(nets, out_dir, model_id) -> None:
    pa, pb = checkpoint_paths(out_dir, model_id)
    pa.parent.mkdir(parents=True, exist_ok=True)
    segnet.save_checkpoint(nets[0], pa)
    segnet.save_checkpoint(nets[1], pb)


def load_model(out_dir, model_id: int) -> tuple[segnet.SegNetParams, segnet.SegNetParams]:
    pa, pb = checkpoint_paths(out_dir, model_id)
    return segnet.load_checkpoint(pa), segnet.load_checkpoint(pb)


def train_cacps_model(
    model_id: int,
    manifest: phantom.DatasetManifest,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Train one CACPS model (two networks) and return its final parameters.

    When ``out_dir`` is given, checkpoints are rewritten after every epoch
    (starting with the initial weights) and metrics rows are written to
    ``metrics_model{id}.csv``.  A non-finite loss aborts with ``diverged``
    and leaves the last good checkpoint in place.
    """
    if model_id not in (1, 2):
        raise CacpsError("config", f"model_id must be 1 or 2, got {model_id}")
    pool = training_pool(manifest, cfg)
    val_entries = manifest.select("val")
    val = Pool.from_entries(manifest, val_entries) if val_entries else None
    if val is not None and not val.labeled.all():
        raise CacpsError("data", "validation split contains unlabeled samples")

    nets = tuple(segnet.init(s) for s in cfg.net_seeds(model_id))
    states = [AdamWState.zeros_like(n.tensors) for n in nets]
    sampler = BatchSampler(pool, cfg, model_id)
    steps = int(cfg.steps_per_epoch) or math.ceil(len(pool) / int(cfg.batch_size))
    onehot_all = losses.labels_to_onehot(pool.masks)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        _save_pair(nets, out, model_id)
    rows: list[dict] = []
    global_step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        for step, idx in enumerate(sampler.epoch(steps)):
            beta = beta_at(cfg, epoch + step / steps)
            aug = augment_for_batch(pool, idx, cfg, [cfg.seeds.shuffle, model_id, epoch, step])
            total, rep = compute_losses(
                nets,
                pool.images[idx][:, None],
                aug[:, None],
                onehot_all[idx],
                pool.labeled[idx],
                beta,
                cfg.grad_through_variance,
            )
            if not all(math.isfinite(x) for x in (rep.L_s, rep.L_cacps, rep.L_total)):
                gm.current_tape().clear()
                raise CacpsError("diverged", f"non-finite loss at epoch {epoch} step {step}")
            gm.backward(total)
            for net, state in zip(nets, states):
                grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in net.tensors]
                if not all(np.isfinite(g).all() for g in grads):
                    raise CacpsError("diverged", f"non-finite gradient at epoch {epoch} step {step}")
                adamw_step(net.tensors, grads, state, lr, cfg.weight_decay)
            global_step += 1
            rows.append(
                {
                    "epoch": epoch,
                    "step": global_step,
                    "model_id": model_id,
                    "L_s": rep.L_s,
                    "L_cacps": rep.L_cacps,
                    "L_total": rep.L_total,
                    "lr": lr,
                    "mean_V": rep.mean_V,
                }
            )
        if val is not None:
            _, pred = ensemble_predict(nets, None, val.images)
            res = evaluate_dice(list(pred), list(val.masks), val.sample_ids)
            rows[-1].update({f"val_dice_{c}": res.per_class[c] for c in CLASS_NAMES})
            rows[-1]["val_dice_avg"] = res.average
        log.info("model %d epoch %d: %s", model_id, epoch, {k: rows[-1].get(k) for k in METRIC_COLUMNS[3:]})
        if out is not None:
            _save_pair(nets, out, model_id)
            (out / f"metrics_model{model_id}.csv").write_text(metrics_csv(rows))
    return TrainResult(model_id, nets, rows, out / f"model{model_id}" if out is not None else None)


def train(manifest: phantom.DatasetManifest, cfg: TrainConfig, out_dir) -> dict[int, TrainResult]:
    """Train every model listed in ``cfg.models``; writes ``metrics.csv`` and ``config.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CacpsError("io", f"cannot create {out}: {exc}") from exc
    (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")
    results = {}
    for m in cfg.models:
        results[m] = train_cacps_model(m, manifest, cfg, out)
    all_rows = [r for m in sorted(results) for r in results[m].rows]
    (out / "metrics.csv").write_text(metrics_csv(all_rows))
    return results
