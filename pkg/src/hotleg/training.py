"""Training loop, k-fold cross-validation and random hyperparameter search."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import fit_scaler, kfold_indices, split_dataset, SplitSpec
from .deeponet import (
    DeepOnetConfig,
    backward,
    build_deeponet,
    forward_with_cache,
    mse_and_grad,
)
from .errors import DivergenceError, InvalidArgumentError, LeakageError, SearchError
from .nn import AdamState, DropoutSpec, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-8
    dropout_rate: float = 0.0
    patience: int = 0               # 0 disables early stopping
    seed: int = 0
    branch_hidden: tuple = (512, 512, 512)
    trunk_hidden: tuple = (512, 512, 256)
    min_delta: float = 1e-12
    keep_best_train: bool = False   # end on the epoch with the lowest training loss

    def __post_init__(self):
        self.branch_hidden = tuple(int(h) for h in self.branch_hidden)
        self.trunk_hidden = tuple(int(h) for h in self.trunk_hidden)
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise InvalidArgumentError("epochs and batch_size must be >= 1, patience >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvalidArgumentError("learning_rate and weight_decay must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["branch_hidden"] = list(self.branch_hidden)
        d["trunk_hidden"] = list(self.trunk_hidden)
        return d

    def model_config(self, n_points, with_heads=True, seed=None):
        return DeepOnetConfig(
            n_points=n_points,
            branch_hidden=self.branch_hidden,
            trunk_hidden=self.trunk_hidden,
            with_heads=with_heads,
            dropout_rate=self.dropout_rate,
            seed=self.seed if seed is None else seed,
        )


# Final phase: whole training split, fixed LR, no holdout, no early stopping.
# Table 1's best LR (0.00098) and the final-phase text (0.001) disagree; the
# final-phase value is used.
PRESETS = {
    "final": TrainConfig(epochs=1000),
    "paper": TrainConfig(epochs=1000),
    "desk": TrainConfig(epochs=300, keep_best_train=True),
    "hpo": TrainConfig(epochs=100, patience=5),
}


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    @property
    def epochs_run(self):
        return len(self.train_loss)

    def to_dict(self):
        return asdict(self)


def scaled_arrays(model, ds):
    return (model.scaler.scale_inputs(ds.inputs),
            model.scaler.scale_fields(ds.fields))


def dataset_loss(model, u, y, coords, chunk=64):
    """Mean squared scaled residual over every (scenario, parameter, node)."""
    total = 0.0
    for i in range(0, u.shape[0], chunk):
        z, _ = forward_with_cache(model, u[i:i + chunk], coords)
        r = z - y[i:i + chunk]
        total += float(np.sum(r * r))
    return total / y.size


def train(model, train_ds, val_ds=None, cfg=None, on_epoch=None):
    """Minimise the scaled MSE with Adam (coupled L2) on shuffled mini-batches.

    With validation data and ``patience > 0`` training stops once the
    validation loss has failed to improve by more than ``min_delta`` for
    ``patience`` consecutive epochs, and the best-epoch parameters are
    restored. Otherwise, with ``keep_best_train``, the parameters at the end
    of the epoch with the lowest mean training loss are kept, so a late Adam
    loss spike does not end up in the returned model. Mutates ``model`` in
    place and returns ``(model, history)``.
    """
    cfg = cfg or TrainConfig()
    for ds in (train_ds, val_ds):
        if ds is not None and ds.role == "test":
            raise LeakageError("the test partition cannot be used for training or validation")
    if train_ds.n_points != model.n_points:
        raise InvalidArgumentError(
            f"model has {model.n_points} nodes, dataset {train_ds.n_points}")
    if model.scaler is None:
        model.scaler = fit_scaler(train_ds)
    if model.coords is None:
        model.coords = train_ds.coords.copy()
    elif not np.array_equal(model.coords, train_ds.coords):
        raise InvalidArgumentError("dataset nodes differ from the model's nodes")

    coords = model.scaled_coords()
    u, y = scaled_arrays(model, train_ds)
    if val_ds is not None:
        u_val, y_val = scaled_arrays(model, val_ds)
    early = val_ds is not None and cfg.patience > 0
    keep_train = cfg.keep_best_train and not early

    grads = np.zeros_like(model.params)
    opt = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    best, best_params, stale = np.inf, None, 0
    m = u.shape[0]

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(m)
        drop_seeds = rng.integers(0, 2**31 - 1, size=(m + cfg.batch_size - 1) // cfg.batch_size)
        running = 0.0
        for j, start in enumerate(range(0, m, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            drop = DropoutSpec(cfg.dropout_rate, "train", int(drop_seeds[j]))
            z, cache = forward_with_cache(model, u[idx], coords, drop)
            loss, dz = mse_and_grad(z, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss became {loss} in epoch {epoch}", epoch=epoch)
            backward(model, cache, dz, grads)
            adam_step(opt, [model.params], [grads], names=["deeponet"])
            running += loss * idx.size
        hist.train_loss.append(running / m)
        if val_ds is not None:
            vl = dataset_loss(model, u_val, y_val, coords)
            if not np.isfinite(vl):
                raise DivergenceError(f"validation loss became {vl} in epoch {epoch}", epoch=epoch)
            hist.val_loss.append(vl)
        hist.wall_time.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, hist)
        if keep_train and hist.train_loss[-1] < best:
            best, best_params = hist.train_loss[-1], model.params.copy()
            hist.best_epoch = epoch
        if early:
            if vl < best - cfg.min_delta:
                best, stale = vl, 0
                best_params = model.params.copy()
                hist.best_epoch = epoch
            else:
                stale += 1
                if stale >= cfg.patience:
                    hist.stopped_early = True
                    break
    if best_params is not None:
        model.params[:] = best_params

    model.provenance.update({
        "train_config": cfg.to_dict(),
        "data_sha256": train_ds.meta.get("parent_sha256", train_ds.fingerprint()),
        "train_indices": train_ds.meta.get("parent_indices"),
        "epochs_run": hist.epochs_run,
    })
    return model, hist


def fit_model(dataset, train_idx, cfg, with_heads=True, val_idx=None, scaler=None, seed=None):
    """Fit the scaler on ``train_idx``, build a fresh model and train it."""
    train_ds = dataset.take(train_idx, role="train")
    val_ds = dataset.take(val_idx, role="validation") if val_idx is not None else None
    model = build_deeponet(cfg.model_config(dataset.n_points, with_heads, seed))
    model.scaler = scaler if scaler is not None else fit_scaler(dataset, train_idx)
    model.coords = dataset.coords.copy()
    return train(model, train_ds, val_ds, cfg)


# --- cross-validation --------------------------------------------------------


@dataclass
class CvReport:
    fold_losses: list
    fold_epochs: list

    @property
    def mean(self):
        return float(np.mean(self.fold_losses))

    @property
    def std(self):
        return float(np.std(self.fold_losses))

    def to_dict(self):
        return {"fold_losses": self.fold_losses, "fold_epochs": self.fold_epochs,
                "mean": self.mean, "std": self.std}


def cross_validate(cfg, dataset, train_idx, k=5, seed=0, with_heads=True, scaler=None):
    """k independent models, one per fold; every fold starts from the same
    seeded initialisation so fold-to-fold spread reflects the data only."""
    pairs = kfold_indices(train_idx, k, seed)
    seen = np.concatenate([v for _, v in pairs])
    assert np.array_equal(np.sort(seen), np.sort(np.asarray(train_idx)))
    losses, epochs = [], []
    for fold, (tr, va) in enumerate(pairs):
        try:
            model, hist = fit_model(dataset, tr, cfg, with_heads, va, scaler)
        except DivergenceError as exc:
            exc.fold = fold
            raise DivergenceError(f"fold {fold}: {exc}", epoch=exc.epoch, fold=fold) from exc
        u, y = scaled_arrays(model, dataset.take(va))
        losses.append(dataset_loss(model, u, y, model.scaled_coords()))
        epochs.append(hist.epochs_run)
        log.info("fold %d/%d: val loss %.4e after %d epochs", fold + 1, k, losses[-1], epochs[-1])
    return CvReport(losses, epochs)


# --- hyperparameter search ---------------------------------------------------


@dataclass
class SearchSpace:
    neurons: tuple = (128, 256, 512)
    dropout: tuple = (0.0, 0.3)
    learning_rate: tuple = (1e-5, 1e-3)
    batch_size: tuple = (16, 32, 64)
    weight_decay: tuple = (1e-8, 1e-6)

    def sample(self, rng):
        def loguniform(lo, hi):
            return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

        return {
            "neurons": int(rng.choice(self.neurons)),
            "dropout_rate": float(rng.uniform(*self.dropout)),
            "learning_rate": loguniform(*self.learning_rate),
            "batch_size": int(rng.choice(self.batch_size)),
            "weight_decay": loguniform(*self.weight_decay),
        }

    def contains(self, s):
        return (s["neurons"] in self.neurons
                and self.dropout[0] <= s["dropout_rate"] <= self.dropout[1]
                and self.learning_rate[0] <= s["learning_rate"] <= self.learning_rate[1]
                and s["batch_size"] in self.batch_size
                and self.weight_decay[0] <= s["weight_decay"] <= self.weight_decay[1])


def config_from_sample(base, sample):
    w = sample["neurons"]
    return replace(
        base,
        branch_hidden=(w, w, w),
        trunk_hidden=(w, w, max(w // 2, 1)),
        dropout_rate=sample["dropout_rate"],
        learning_rate=sample["learning_rate"],
        batch_size=sample["batch_size"],
        weight_decay=sample["weight_decay"],
    )


@dataclass
class TrialResult:
    trial: int
    sample: dict
    val_loss: float
    fold_losses: list
    epochs_run: int
    train_loss: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    status: str = "ok"


@dataclass
class SearchResult:
    best: TrialResult
    trials: list


def hyperparameter_search(dataset, train_idx, trials=50, seed=0, space=None, base=None,
                          with_heads=True, log_path=None, val_fraction=0.2):
    """Seeded random search; each trial scores one fixed train/validation split
    of ``train_idx`` with early stopping. The trial log is JSON lines."""
    space = space or SearchSpace()
    base = base or PRESETS["hpo"]
    if trials < 1:
        raise InvalidArgumentError("need at least one trial")
    train_idx = np.asarray(train_idx)
    inner_tr, inner_va = split_dataset(train_idx.size, SplitSpec(1.0 - val_fraction, seed))
    tr, va = train_idx[inner_tr], train_idx[inner_va]
    rng = np.random.default_rng(seed)
    results = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for t in range(trials):
            sample = space.sample(rng)
            cfg = config_from_sample(base, sample)
            try:
                _, hist = fit_model(dataset, tr, cfg, with_heads, va)
                best_val = float(min(hist.val_loss))
                res = TrialResult(t, sample, best_val, [best_val], hist.epochs_run,
                                  hist.train_loss, hist.val_loss)
            except DivergenceError as exc:
                res = TrialResult(t, sample, float("inf"), [], exc.epoch or 0, status="diverged")
            results.append(res)
            if log_file:
                log_file.write(json.dumps(asdict(res)) + "\n")
                log_file.flush()
            log.info("trial %d: %s -> %.4e", t, sample, res.val_loss)
    finally:
        if log_file:
            log_file.close()
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        raise SearchError(f"all {trials} trials diverged")
    return SearchResult(min(ok, key=lambda r: r.val_loss), results)
