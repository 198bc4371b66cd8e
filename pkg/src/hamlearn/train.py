"""Fitting ASRNN weights to a sparse dataset: single models and ensembles."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as mdl
from .datagen import SparseDataset, slice_windows, train_val_split
from .integrate import IntegrationBlowup
from .model import AsrnnModel
from .optim import AdamConfig, LbfgsConfig, adam_minimize, lbfgs_minimize

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    hidden: tuple[int, ...] = (30, 30, 30)
    k_hidden: tuple[int, ...] | None = None

    @classmethod
    def for_system(cls, system: str) -> "Architecture":
        if system == "henon_heiles":
            return cls((30, 30, 30))
        return cls((50, 50))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    optimizer: str = "lbfgs"
    lbfgs: LbfgsConfig = LbfgsConfig()
    adam: AdamConfig = AdamConfig()
    adam_rescue_steps: int = 50
    batch_size: int | None = None  # None = full batch
    ensemble_size: int = 3
    master_seed: int = 0
    validation_fraction: float = 0.25
    reslice: bool = True
    squared_loss: bool = True
    max_reinit: int = 3

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be at least 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lbfgs" in d:
            d["lbfgs"] = LbfgsConfig(**d["lbfgs"])
        if "adam" in d:
            a = dict(d["adam"])
            if "betas" in a:
                a["betas"] = tuple(a["betas"])
            d["adam"] = AdamConfig(**a)
        return cls(**d)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    n_evals: int = 0
    diverged: bool = False
    events: list[str] = field(default_factory=list)
    member_seed: int = 0
    checkpoint: str | None = None
    wall_time: float = 0.0  # logged only; kept out of serialized output

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss)):
            w.writerow([i, "%.17g" % a, "%.17g" % b])
        return buf.getvalue()


def member_seed(master_seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(i)]).generate_state(1)[0])


def _objective(template: AsrnnModel, data: SparseDataset, squared: bool):
    def fun(theta):
        try:
            return mdl.asrnn_loss_and_grad(template.with_flat(theta), data, squared)
        except IntegrationBlowup:
            return math.inf, None
    return fun


def _value(template: AsrnnModel, data: SparseDataset, theta, squared: bool) -> float:
    try:
        with np.errstate(all="ignore"):
            return mdl.asrnn_loss(template.with_flat(theta), data, squared)
    except IntegrationBlowup:
        return math.inf


def _batches(n: int, size: int | None, epoch: int, seed: int):
    if size is None or size >= n:
        return [np.arange(n)]
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [np.sort(perm[i:i + size]) for i in range(0, n, size)]


def train_one(ds: SparseDataset, arch: Architecture, cfg: TrainConfig, seed: int,
              init: AsrnnModel | None = None) -> tuple[AsrnnModel, TrainReport]:
    """Minimize the trajectory-matching loss; return the best-validation model."""
    t_start = time.perf_counter()
    train_idx, val_idx = train_val_split(len(ds), cfg.validation_fraction, seed)
    train_ds, val_ds = ds.subset(train_idx), ds.subset(val_idx)
    if len(val_ds) == 0:
        val_ds = train_ds
    report = TrainReport(member_seed=seed)
    sq = cfg.squared_loss

    m = init
    for attempt in range(cfg.max_reinit + 1):
        if m is None:
            m = mdl.build(ds.dim, ds.lam.shape[1], arch.hidden, ds.dt, member_seed(seed, 1000 + attempt),
                          arch.k_hidden)
        f0 = _value(m, train_ds, m.flat(), sq)
        if math.isfinite(f0):
            break
        report.events.append(f"reinit {attempt + 1}: initial rollout diverged")
        m = None
    else:
        raise TrainingFailure(f"rollout diverged after {cfg.max_reinit} reinitializations")

    theta = m.flat()
    best = theta.copy()
    report.best_val_loss = _value(m, val_ds, theta, sq)

    def record(th, f_train):
        v = _value(m, val_ds, th, sq)
        report.train_loss.append(float(f_train))
        report.val_loss.append(float(v))
        if v < report.best_val_loss:
            report.best_val_loss = v
            report.best_epoch = len(report.val_loss)
            best[:] = th

    epoch = 0
    rescues = 0
    while epoch < cfg.epochs:
        if cfg.optimizer == "adam" or cfg.batch_size is not None:
            for idx in _batches(len(train_ds), cfg.batch_size, epoch, seed):
                fun = _objective(m, train_ds.subset(idx), sq)
                if cfg.optimizer == "adam":
                    theta, _ = adam_minimize(fun, theta, cfg.adam, steps=1)
                else:
                    theta = lbfgs_minimize(fun, theta, cfg.lbfgs, max_iter=1).x
            record(theta, _value(m, train_ds, theta, sq))
            epoch += 1
            continue

        def cb(it, th, f):
            record(th, f)
            return epoch + it >= cfg.epochs

        res = lbfgs_minimize(_objective(m, train_ds, sq), theta, cfg.lbfgs, cfg.epochs - epoch, cb)
        report.n_evals += res.n_evals
        theta = res.x
        epoch += res.iterations
        if res.status in ("converged", "stopped", "max_iter"):
            break
        if res.status == "non_finite":
            report.diverged = True
            report.events.append(f"epoch {epoch}: non-finite loss, keeping last finite parameters")
            break
        # line-search failure: one Adam pass, then resume with fresh curvature
        rescues += 1
        report.events.append(f"epoch {epoch}: line search failed, Adam rescue {rescues}")
        log.info("line search failed at epoch %d; running Adam rescue", epoch)
        if rescues > 10:
            break
        theta, _ = adam_minimize(_objective(m, train_ds, sq), theta, cfg.adam, cfg.adam_rescue_steps)
        record(theta, _value(m, train_ds, theta, sq))
        epoch += 1

    report.wall_time = time.perf_counter() - t_start
    out = m.with_flat(best)
    out = replace(out, metadata={**m.metadata, "member_seed": seed, "best_epoch": report.best_epoch,
                                 "best_val_loss": report.best_val_loss})
    log.info("member seed %d: best val %.3e at epoch %d (%.1fs)", seed, report.best_val_loss,
             report.best_epoch, report.wall_time)
    return out, report


def member_dataset(ds: SparseDataset, cfg: TrainConfig, mseed: int) -> SparseDataset:
    """Fresh window offsets and k values for one ensemble member, when possible."""
    if cfg.reslice and ds.bank is not None:
        return slice_windows(ds.bank, ds.window_len, mseed, ds.noise_initial)
    return ds


def train_ensemble(ds: SparseDataset, arch: Architecture, cfg: TrainConfig, members=None):
    """Independent members; failures are recorded unless every member fails."""
    members = range(cfg.ensemble_size) if members is None else members
    results = []
    for i in members:
        mseed = member_seed(cfg.master_seed, i)
        try:
            results.append(train_one(member_dataset(ds, cfg, mseed), arch, cfg, mseed))
        except TrainingFailure as exc:
            log.warning("member %d failed: %s", i, exc)
            results.append((None, TrainReport(member_seed=mseed, diverged=True, events=[str(exc)])))
    if all(m is None for m, _ in results):
        raise TrainingFailure("every ensemble member failed")
    return results


def save_member(path_dir, i: int, m: AsrnnModel, report: TrainReport) -> dict:
    path_dir = Path(path_dir)
    path_dir.mkdir(parents=True, exist_ok=True)
    ck = path_dir / f"member_{i:03d}.json"
    digest = m.save(ck) if m is not None else None
    report.checkpoint = ck.name if m is not None else None
    (path_dir / f"member_{i:03d}_report.json").write_text(json.dumps(report.to_dict(), sort_keys=True))
    (path_dir / f"member_{i:03d}_loss.csv").write_text(report.curves_csv())
    return {"member": i, "checkpoint": report.checkpoint, "sha256": digest}
