"""Training loop: Adam, warm-up + cosine learning-rate schedule, NMSE metrics.

Adam uses beta1=0.9, beta2=0.999, eps=1e-8 and the batch size defaults to 200;
both are assumptions, listed in every report header.
"""

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, mse_loss
from .csi import denormalize
from .errors import ConfigError, NumericError, UsageError
from .model import save_checkpoint
from .serialization import atomic_write

NMSE_FLOOR_DB = -120.0
METRICS_COLUMNS = ("epoch", "lr", "train_loss", "val_nmse_db")
ASSUMPTIONS = ("adam beta1=0.9 beta2=0.999 eps=1e-8", "batch size default 200",
               "linear warm-up from gamma_min to gamma_max",
               "best checkpoint chosen by validation NMSE")


@dataclass(frozen=True)
class LrSchedule:
    gamma_min: float = 5e-5
    gamma_max: float = 2e-3
    warmup: int = 10
    total: int = 200

    def __post_init__(self):
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ConfigError(f"need 0 < gamma_min <= gamma_max, got "
                              f"{self.gamma_min}, {self.gamma_max}")
        if not 0 <= self.warmup < self.total:
            raise ConfigError(f"need 0 <= warmup < total, got {self.warmup}, {self.total}")


def cosine_lr(t, s):
    """Learning rate at epoch ``t`` in [0, T]: linear warm-up, then cosine decay."""
    if t < 0 or t > s.total:
        raise UsageError(f"epoch {t} outside schedule range [0, {s.total}]")
    if t < s.warmup:
        return s.gamma_min + (s.gamma_max - s.gamma_min) * t / s.warmup
    phase = (t - s.warmup) / (s.total - s.warmup)
    return s.gamma_min + 0.5 * (s.gamma_max - s.gamma_min) * (1.0 + math.cos(phase * math.pi))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr):
    """One bias-corrected Adam update, in place, using each parameter's ``grad``."""
    params = list(params)
    for p in params:
        if p.grad is None or p.grad.shape != p.data.shape:
            raise UsageError(f"parameter {p.name!r} has no gradient to apply")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data -= (lr / c1) * m / denom


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class NmseResult:
    db: float
    linear: float
    samples: int
    skipped: int


def nmse_ratios(ref, est):
    """Per-sample ``||ref - est||^2 / ||ref||^2``; zero-energy samples give NaN."""
    ref = np.asarray(ref)
    est = np.asarray(est)
    if ref.shape != est.shape:
        raise ConfigError(f"nmse: shapes differ {ref.shape} vs {est.shape}")
    n = ref.shape[0]
    err = np.sum(np.abs(ref - est).reshape(n, -1) ** 2, axis=1, dtype=np.float64)
    power = np.sum(np.abs(ref).reshape(n, -1) ** 2, axis=1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(power > 0, err / np.where(power > 0, power, 1.0), np.nan)


def to_db(ratio):
    if ratio <= 0:
        return NMSE_FLOOR_DB
    return max(NMSE_FLOOR_DB, 10.0 * math.log10(ratio))


def nmse(ref, est):
    """Mean per-sample NMSE over samples with nonzero energy."""
    r = nmse_ratios(ref, est)
    ok = ~np.isnan(r)
    skipped = int(r.size - ok.sum())
    if not ok.any():
        raise NumericError("every sample has zero energy; NMSE undefined")
    lin = float(np.mean(r[ok]))
    return NmseResult(to_db(lin), lin, int(ok.sum()), skipped)


def reconstruct(model, data, batch_size=500):
    """Eval-mode forward pass over ``data`` in batches (model mode restored)."""
    was_training = model.training
    model.eval()
    try:
        out = np.empty_like(data, dtype=model.dtype)
        for i in range(0, data.shape[0], batch_size):
            out[i:i + batch_size] = model(Tensor(data[i:i + batch_size], dtype=model.dtype)).data
    finally:
        model.train(was_training)
    return out


def evaluate(model, dataset, batch_size=500):
    """NMSE of the model on ``dataset``, measured on denormalized tensors."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    c = model.config
    if (dataset.na, dataset.nt) != (c.na, c.nt):
        raise ConfigError(f"dataset is {dataset.na}x{dataset.nt}, model expects {c.na}x{c.nt}")
    est = reconstruct(model, dataset.data, batch_size)
    return nmse(dataset.denormalized(), denormalize(est, dataset.norm))


def evaluate_nmse(model, dataset, batch_size=500):
    """NMSE in dB (floored at -120 dB)."""
    return evaluate(model, dataset, batch_size).db


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_nmse_db: float
    seconds: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_nmse_db: float = math.inf
    best_checkpoint: str = None
    final_train_nmse_db: float = None
    final_val_nmse_db: float = None
    assumptions: tuple = ASSUMPTIONS

    def metrics_csv(self):
        """Per-epoch metrics. Wall-clock time is kept out so that runs with the
        same seed produce byte-identical files; see :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_nmse_db)])
        return buf.getvalue()

    def timing_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "seconds"))
        for r in self.records:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])
        return buf.getvalue()

    def summary(self):
        """JSON-ready dict of the headline numbers."""
        return {"epochs": len(self.records), "best_epoch": self.best_epoch,
                "best_val_nmse_db": self.best_val_nmse_db,
                "final_train_nmse_db": self.final_train_nmse_db,
                "final_val_nmse_db": self.final_val_nmse_db,
                "best_checkpoint": self.best_checkpoint,
                "assumptions": list(self.assumptions)}


def _write_text(path, text):
    with atomic_write(path, "w") as f:
        f.write(text)


def train(model, train_set, val_set, schedule=None, epochs=None, batch_size=200, seed=0,
          out_dir=None, log=None):
    """Train in place. Epoch ``e`` (1-based) uses ``cosine_lr(e, schedule)``.

    With ``out_dir``, the best-validation checkpoint goes to ``best.dcrc``, the
    final weights to ``final.dcrc``, per-epoch metrics to ``metrics.csv`` and
    epoch durations to ``timing.csv``.
    """
    schedule = schedule or LrSchedule()
    epochs = schedule.total if epochs is None else int(epochs)
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if epochs > schedule.total:
        raise UsageError(f"{epochs} epochs exceed the schedule length {schedule.total}")
    n = len(train_set)
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch size {batch_size} must be in [1, {n}] (training samples)")
    c = model.config
    for ds in (train_set, val_set):
        if (ds.na, ds.nt) != (c.na, c.nt):
            raise ConfigError(f"dataset is {ds.na}x{ds.nt}, model expects {c.na}x{c.nt}")

    rng = np.random.default_rng(seed)
    state = AdamState()
    params = list(model.parameters())
    report = TrainReport()
    data = np.ascontiguousarray(train_set.data, dtype=model.dtype)
    best_path = os.path.join(out_dir, "best.dcrc") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    model.train()

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, schedule)
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            batch = Tensor(data[order[i:i + batch_size]], dtype=model.dtype)
            model.zero_grad()
            with Tape() as tape:
                loss = mse_loss(model(batch), batch)
            tape.backward(loss)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            adam_step(params, state, lr)
            total += value * batch.shape[0]
        val_db = evaluate_nmse(model, val_set)
        rec = EpochRecord(epoch, lr, total / n, val_db, time.perf_counter() - t0)
        report.records.append(rec)
        if val_db < report.best_val_nmse_db:
            report.best_val_nmse_db = val_db
            report.best_epoch = epoch
            if best_path:
                save_checkpoint(model, best_path)
                report.best_checkpoint = best_path
        if out_dir:
            _write_text(os.path.join(out_dir, "metrics.csv"), report.metrics_csv())
            _write_text(os.path.join(out_dir, "timing.csv"), report.timing_csv())
        if log:
            log(f"epoch {epoch:4d} lr {lr:.3e} loss {rec.train_loss:.4e} "
                f"val {val_db:7.2f} dB ({rec.seconds:.1f}s)")

    report.final_train_nmse_db = evaluate_nmse(model, train_set)
    report.final_val_nmse_db = report.records[-1].val_nmse_db
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "final.dcrc"))
    return report
