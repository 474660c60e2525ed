"""Training loops, logs and checkpoint I/O for both autoencoders.

Both trainers follow the same shape: tensorize the datasets once, evaluate
an epoch-0 baseline before any step, run seeded mini-batch epochs, log
per-epoch losses, abort on non-finite loss, and return the parameters of the
best validation epoch.
"""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .grid_ae import GridAutoencoder, grid_loss
from .grids import GridConfig, rasterize, smooth_target
from .scenarios import Scenario, resample_to_frames
from .seqdspn import DSPNConfig, SeqDSPN, seqdspn_loss_parts

_DETERMINISM_NOTE = (
    "deterministic for a fixed seed, torch build and thread count; "
    "run single-threaded for byte-stable artifacts"
)


@dataclass(frozen=True)
class TrainHyperparams:
    """Optimizer settings shared by both trainers."""

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive when set")


@dataclass
class TrainingLog:
    """Per-epoch loss records plus run metadata.

    Epoch 0 is the pre-training baseline evaluated with the initial
    parameters; epochs 1..N follow each optimization pass. elapsed_seconds
    is the wall time of the run that produced the log; it is deliberately
    excluded from to_dict/save so that persisted artifacts depend only on
    config and seed, never on machine speed.
    """

    entries: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    elapsed_seconds: float = float("nan")

    def append(self, **entry) -> None:
        self.entries.append(entry)

    def epoch(self, index: int) -> dict:
        for entry in self.entries:
            if entry["epoch"] == index:
                return entry
        raise KeyError(f"no log entry for epoch {index}")

    @property
    def best_epoch(self) -> int:
        return min(self.entries, key=lambda e: e["val_loss"])["epoch"]

    def to_dict(self) -> dict:
        return {"entries": self.entries, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingLog":
        return cls(entries=list(d["entries"]), meta=dict(d["meta"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrainingLog":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_finite(loss: torch.Tensor, what: str, epoch: int, batch: int) -> None:
    if not torch.isfinite(loss).all():
        raise RuntimeError(
            f"training diverged: non-finite {what} at epoch {epoch}, batch {batch}"
        )


def make_optimizer(model: torch.nn.Module, hp: TrainHyperparams) -> torch.optim.Optimizer:
    if hp.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=hp.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=hp.learning_rate)


def train_val_split(count: int, val_fraction: float = 0.2, split_seed: int = 77):
    """Deterministic index split shared by every run on the same dataset."""
    if count < 2:
        raise ValueError(f"need at least 2 scenarios to split, got {count}")
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    perm = np.random.default_rng(split_seed).permutation(count)
    n_val = min(count - 1, max(1, int(round(count * val_fraction))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def scenarios_to_grid_tensors(
    scenarios: Sequence[Scenario], cfg: GridConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rasterize scenarios into (inputs, targets): raw grids and their
    smoothed-occupancy counterparts, both (N, d_t, d_x, d_y, n_c) float32."""
    inputs = np.empty((len(scenarios), *cfg.shape), dtype=np.float32)
    targets = np.empty_like(inputs)
    for i, scenario in enumerate(scenarios):
        raw = rasterize(scenario, cfg)
        inputs[i] = raw.values
        targets[i] = smooth_target(raw, cfg).values
    return torch.from_numpy(inputs), torch.from_numpy(targets)


def scenarios_to_frame_tensors(
    scenarios: Sequence[Scenario], cfg: DSPNConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Resample scenarios into (elements, masks): (N, T, n_max, 3) float32
    raw feature rows and (N, T, n_max) boolean validity."""
    n = len(scenarios)
    elements = np.zeros((n, cfg.frame_count, cfg.n_max, 3), dtype=np.float32)
    masks = np.zeros((n, cfg.frame_count, cfg.n_max), dtype=bool)
    for i, scenario in enumerate(scenarios):
        frames = resample_to_frames(scenario, cfg.frame_count, cfg.frame_rate_hz, cfg.n_max)
        for t, frame in enumerate(frames):
            elements[i, t] = frame.elements
            masks[i, t] = frame.mask
    return torch.from_numpy(elements), torch.from_numpy(masks)


def _grid_tensors(dataset, cfg: GridConfig):
    if isinstance(dataset, tuple):
        return dataset
    return scenarios_to_grid_tensors(dataset, cfg)


def _mean_grid_loss(model: GridAutoencoder, x: torch.Tensor, tgt: torch.Tensor, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start : start + batch_size]
            _, recon, _ = model(xb)
            total += float(grid_loss(tgt[start : start + batch_size], recon).sum())
    return total / x.shape[0]


def train_grid_ae(
    train_set,
    val_set,
    hp: TrainHyperparams,
    cfg: GridConfig | None = None,
) -> tuple[GridAutoencoder, TrainingLog]:
    """Train the grid autoencoder; returns best-validation parameters.

    train_set/val_set: scenario sequences, or (inputs, targets) tensor pairs
    from scenarios_to_grid_tensors.
    """
    cfg = cfg if cfg is not None else GridConfig()
    x_train, t_train = _grid_tensors(train_set, cfg)
    x_val, t_val = _grid_tensors(val_set, cfg)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("train and validation sets must be non-empty")

    torch.manual_seed(hp.seed)
    model = GridAutoencoder(cfg)
    opt = make_optimizer(model, hp)
    shuffler = torch.Generator().manual_seed(hp.seed)
    t0 = time.monotonic()
    log = TrainingLog(meta={
        "model": "grid_ae",
        "seed": hp.seed,
        "hyperparams": asdict(hp),
        "determinism": _DETERMINISM_NOTE,
    })

    log.append(
        epoch=0,
        train_loss=_mean_grid_loss(model, x_train, t_train, hp.batch_size),
        val_loss=_mean_grid_loss(model, x_val, t_val, hp.batch_size),
    )
    best_val = log.entries[0]["val_loss"]
    best_state = copy.deepcopy(model.state_dict())

    n = x_train.shape[0]
    for epoch in range(1, hp.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffler)
        running = 0.0
        for bi, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start : start + hp.batch_size]
            _, recon, _ = model(x_train[idx])
            loss = grid_loss(t_train[idx], recon).mean()
            _check_finite(loss, "grid loss", epoch, bi)
            opt.zero_grad()
            loss.backward()
            if hp.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), hp.max_grad_norm)
            opt.step()
            running += float(loss.detach()) * idx.shape[0]
        val_loss = _mean_grid_loss(model, x_val, t_val, hp.batch_size)
        log.append(epoch=epoch, train_loss=running / n, val_loss=val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
    log.elapsed_seconds = time.monotonic() - t0
    model.load_state_dict(best_state)
    model.eval()
    return model, log


def _frame_tensors(dataset, cfg: DSPNConfig):
    if isinstance(dataset, tuple):
        return dataset
    return scenarios_to_frame_tensors(dataset, cfg)


def _eval_seqdspn(
    model: SeqDSPN, el: torch.Tensor, m: torch.Tensor, hp: TrainHyperparams, cfg: DSPNConfig
) -> dict:
    """Validation pass; fixed per-batch inner-init seeds keep epochs comparable."""
    model.eval()
    totals = {"val_loss": 0.0, "val_set_loss": 0.0, "val_embed_loss": 0.0}
    descended = 0
    frames = 0
    # no_grad is safe here: the model re-enables autograd internally for the
    # inner loop, which differentiates w.r.t. its own candidate sets only
    with torch.no_grad():
        for bi, start in enumerate(range(0, el.shape[0], hp.batch_size)):
            sl = slice(start, start + hp.batch_size)
            gen = torch.Generator().manual_seed(hp.seed * 1_000_003 + 500_000 + bi)
            out = model(el[sl], m[sl], generator=gen, create_graph=False)
            parts = seqdspn_loss_parts(out, el[sl], m[sl], cfg)
            bs = el[sl].shape[0]
            totals["val_loss"] += float(parts.total) * bs
            totals["val_set_loss"] += float(parts.set_term) * bs
            totals["val_embed_loss"] += float(parts.embed_term) * bs
            descended += int((out["inner_final"] < out["inner_first"]).sum())
            frames += out["inner_first"].numel()
    n = el.shape[0]
    result = {k: v / n for k, v in totals.items()}
    result["inner_descent_frac"] = descended / frames
    return result


def train_seqdspn(
    train_set,
    val_set,
    hp: TrainHyperparams,
    cfg: DSPNConfig | None = None,
) -> tuple[SeqDSPN, TrainingLog]:
    """Train the sequential set autoencoder end to end through the unrolled
    inner loop; returns best-validation parameters.

    train_set/val_set: scenario sequences, or (elements, masks) tensor pairs
    from scenarios_to_frame_tensors.
    """
    cfg = cfg if cfg is not None else DSPNConfig()
    el_train, m_train = _frame_tensors(train_set, cfg)
    el_val, m_val = _frame_tensors(val_set, cfg)
    if el_train.shape[0] == 0 or el_val.shape[0] == 0:
        raise ValueError("train and validation sets must be non-empty")

    torch.manual_seed(hp.seed)
    model = SeqDSPN(cfg)
    opt = make_optimizer(model, hp)
    shuffler = torch.Generator().manual_seed(hp.seed)
    t0 = time.monotonic()
    log = TrainingLog(meta={
        "model": "seqdspn",
        "seed": hp.seed,
        "hyperparams": asdict(hp),
        "dspn": asdict(cfg),
        "determinism": _DETERMINISM_NOTE,
    })

    baseline = _eval_seqdspn(model, el_val, m_val, hp, cfg)
    log.append(epoch=0, train_loss=None, **baseline)
    best_val = baseline["val_loss"]
    best_state = copy.deepcopy(model.state_dict())

    n = el_train.shape[0]
    for epoch in range(1, hp.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffler)
        running = 0.0
        for bi, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start : start + hp.batch_size]
            gen = torch.Generator().manual_seed(hp.seed * 1_000_003 + epoch * 1009 + bi)
            out = model(el_train[idx], m_train[idx], generator=gen)
            parts = seqdspn_loss_parts(out, el_train[idx], m_train[idx], cfg)
            _check_finite(parts.total, "seqdspn loss", epoch, bi)
            opt.zero_grad()
            parts.total.backward()
            if hp.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), hp.max_grad_norm)
            opt.step()
            running += float(parts.total.detach()) * idx.shape[0]
        stats = _eval_seqdspn(model, el_val, m_val, hp, cfg)
        log.append(epoch=epoch, train_loss=running / n, **stats)
        if stats["val_loss"] < best_val:
            best_val = stats["val_loss"]
            best_state = copy.deepcopy(model.state_dict())
    log.elapsed_seconds = time.monotonic() - t0
    model.load_state_dict(best_state)
    model.eval()
    return model, log


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    log: TrainingLog,
    config_hash: str = "",
    extra: dict | None = None,
) -> None:
    """Persist model parameters together with their config and training log."""
    if isinstance(model, GridAutoencoder):
        payload = {"kind": "grid_ae", "grid_config": asdict(model.cfg)}
    elif isinstance(model, SeqDSPN):
        payload = {"kind": "seqdspn", "dspn_config": asdict(model.cfg)}
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    payload.update({
        "state_dict": model.state_dict(),
        "log": log.to_dict(),
        "config_hash": config_hash,
        "format_version": 1,
    })
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    for key in ("kind", "state_dict"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} missing {key!r}")
    return payload


def model_from_checkpoint(payload: dict) -> torch.nn.Module:
    """Rebuild the saved model in eval mode."""
    if payload["kind"] == "grid_ae":
        model = GridAutoencoder(GridConfig(**_detuple(payload["grid_config"])))
    elif payload["kind"] == "seqdspn":
        model = SeqDSPN(DSPNConfig(**_detuple(payload["dspn_config"])))
    else:
        raise ValueError(f"unknown checkpoint kind {payload['kind']!r}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def _detuple(config: dict) -> dict:
    # json round-trips turn tuples into lists; dataclass fields want tuples
    return {k: tuple(v) if isinstance(v, list) else v for k, v in config.items()}
