"""Pre-training loop: SLM pairs -> siamese forward -> assignments -> losses -> AdamW/EMA/prototypes."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .assignments import PrototypeBank, student_probs, teacher_probs, update_prototypes
from .backbone import BackboneConfig, SiameseModel, ema_update, patchify, substitute_mask_tokens
from .errors import ConfigurationError, NumericalError, PersistenceError
from .losses import LossBreakdown, category_loss, restoration_loss, structure_loss, total_loss
from .slm import SLMConfig, apply_slm, draw_slm, otsu_binarize, sample_rng, tokenize_mask

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "epoch", "l_stru", "l_cate", "l_recon", "l_total", "lr", "wd", "tau_t", "lambda")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 5e-4  # peak lr = base_lr * batch_size / 256
    warmup_epochs: int | None = None  # None: 2.5% of epochs, at least 1
    wd_start: float = 0.04
    wd_end: float = 0.4
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warmup_epochs: int | None = None  # None: 30/800 of epochs, at least 1
    lam_start: float = 0.99
    lam_end: float = 1.0
    momentum: float = 0.9
    beta: float = 4.0
    n_slm: int = 9
    r_min: int = 1
    r_max: int = 4
    sinkhorn_iters: int = 3
    sinkhorn_position_wise: bool = False
    checkpoint_every: int = 5
    seed: int = 0
    # ablation switches
    use_structure: bool = True
    use_category: bool = True
    use_recon: bool = True
    use_mask_token: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch size must be >= 2, got {self.batch_size}")
        for lo, hi, name in ((self.wd_start, self.wd_end, "weight decay"), (self.tau_t_start, self.tau_t_end, "tau_t"),
                             (self.lam_start, self.lam_end, "lambda")):
            if lo > hi:
                raise ConfigurationError(f"{name} range must be ordered, got ({lo}, {hi})")
        if not 0 <= self.lam_start <= self.lam_end <= 1:
            raise ConfigurationError("lambda range must lie in [0, 1]")
        if self.n_slm < 1 or self.sinkhorn_iters < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("n_slm, sinkhorn_iters and checkpoint_every must be >= 1")
        if self.tau_s <= 0 or self.tau_t_start <= 0:
            raise ConfigurationError("temperatures must be positive")
        self.slm_config().validate()
        self.backbone.validate()

    def slm_config(self) -> SLMConfig:
        return SLMConfig(r_min=self.r_min, r_max=self.r_max)

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        return cls(backbone=BackboneConfig(**bb), **d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class Schedules:
    lr: np.ndarray
    wd: np.ndarray
    tau_t: np.ndarray
    lam: np.ndarray

    def at(self, step: int) -> tuple[float, float, float, float]:
        i = min(step, len(self.lr) - 1)
        return float(self.lr[i]), float(self.wd[i]), float(self.tau_t[i]), float(self.lam[i])


def _cosine(start: float, end: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([start], dtype=np.float64)
    t = np.arange(n, dtype=np.float64) / (n - 1)
    return end + (start - end) * 0.5 * (1.0 + np.cos(np.pi * t))


def make_schedules(cfg: TrainConfig, steps_per_epoch: int) -> Schedules:
    """Per-step lr, weight decay, teacher temperature and EMA factor."""
    if steps_per_epoch < 1:
        raise ConfigurationError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    total = cfg.epochs * steps_per_epoch
    if total < 1:
        raise ConfigurationError("schedule has zero steps")
    warm_ep = cfg.warmup_epochs if cfg.warmup_epochs is not None else max(1, round(cfg.epochs * 20 / 800))
    warm = min(warm_ep * steps_per_epoch, total - 1)
    peak = cfg.peak_lr
    lr = np.empty(total, dtype=np.float64)
    lr[:warm] = peak * np.arange(warm, dtype=np.float64) / max(warm, 1)
    lr[warm:] = _cosine(peak, 0.0, total - warm)

    tw_ep = cfg.tau_t_warmup_epochs if cfg.tau_t_warmup_epochs is not None else max(1, round(cfg.epochs * 30 / 800))
    tw = max(tw_ep * steps_per_epoch, 1)
    frac = np.minimum(np.arange(total, dtype=np.float64) / tw, 1.0)
    tau_t = cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * frac

    return Schedules(lr, _cosine(cfg.wd_start, cfg.wd_end, total), tau_t, _cosine(cfg.lam_start, cfg.lam_end, total))


def steps_per_epoch(num_images: int, batch_size: int) -> int:
    """Full batches plus a trailing partial batch when it holds at least two images."""
    full, rest = divmod(num_images, batch_size)
    return full + (1 if rest >= 2 else 0)


class Batch(NamedTuple):
    x: np.ndarray  # (B, H, W) normal images
    x_aug: np.ndarray  # (B, H, W) with lesions
    masks: np.ndarray  # (B, H, W)
    labels: np.ndarray  # (B, L) True = abnormal


def _make_optimizer(model: SiameseModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for _, p in model.trainable_named_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.wd_start}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.999), foreach=False)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: SiameseModel
    optimizer: torch.optim.Optimizer
    bank: PrototypeBank
    steps_per_epoch: int
    step: int = 0
    schedules: Schedules | None = None

    def __post_init__(self):
        if self.schedules is None:
            self.schedules = make_schedules(self.cfg, self.steps_per_epoch)

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch


def init_state(cfg: TrainConfig, steps_per_epoch_: int) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = SiameseModel(cfg.backbone)
    bank = PrototypeBank.empty(cfg.backbone.num_tokens, cfg.backbone.num_prototypes, cfg.momentum)
    return TrainState(cfg, model, _make_optimizer(model, cfg), bank, steps_per_epoch_)


def _grad_norms(model: SiameseModel) -> dict:
    return {
        name: float(p.grad.norm()) for name, p in model.trainable_named_parameters() if p.grad is not None
    }


def _dump_diagnostics(path: Path | None, step: int, parts: dict, grads: dict) -> None:
    if path is None:
        return
    try:
        path.write_text(json.dumps({"step": step, "loss": parts, "grad_norms": grads}, indent=2, default=str))
    except OSError:
        log.exception("could not write diagnostics to %s", path)


def _forward(state: TrainState, x, x_aug, labels, tau_t):
    """Steps (1)-(6): assignments, prototype update and the three loss terms."""
    cfg = state.cfg
    model = state.model
    # (1) teacher sees real normal images only, without gradients
    with torch.no_grad():
        t_logits = model.teacher_head(model.teacher(x))
    # (2)-(3) balanced teacher assignments update the prototypes
    q_t = teacher_probs(t_logits, tau_t, cfg.sinkhorn_iters, cfg.sinkhorn_position_wise)
    bank = update_prototypes(state.bank, q_t)

    # (4)-(5) student sees the lesioned images
    z_s = model.student(x_aug)
    q_s = student_probs(model.student_head(z_s), cfg.tau_s)
    zero = q_s.sum() * 0.0
    l_stru, n_stru = structure_loss(q_s, labels, bank.prototypes, cfg.tau_s) if cfg.use_structure else (zero, 0)
    l_cate, n_cate = category_loss(q_s, labels, bank.prototypes, cfg.tau_s) if cfg.use_category else (zero, 0)

    # (6) restore the normal image from mask-substituted student tokens
    if cfg.use_recon:
        z_tilde = substitute_mask_tokens(z_s, labels, model.mask_token) if cfg.use_mask_token else z_s
        y = model.decoder(z_tilde)
        l_recon = restoration_loss(y, patchify(x, cfg.backbone.patch), labels, cfg.beta)
    else:
        l_recon = zero
    total, parts = total_loss(l_stru, l_cate, l_recon, n_stru, n_cate)
    return total, parts, bank


def train_step(state: TrainState, batch: Batch, diagnostics: Path | None = None) -> tuple[TrainState, LossBreakdown]:
    cfg = state.cfg
    model = state.model
    lr, wd, tau_t, lam = state.schedules.at(state.step)
    x = torch.as_tensor(batch.x, dtype=torch.float32)
    x_aug = torch.as_tensor(batch.x_aug, dtype=torch.float32)
    labels = np.asarray(batch.labels, dtype=bool)

    try:
        total, parts, bank = _forward(state, x, x_aug, labels, tau_t)
    except NumericalError as exc:
        _dump_diagnostics(diagnostics, state.step, {"error": str(exc)}, {})
        raise

    # (7) AdamW on student, head, decoder and mask token
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        if group["weight_decay"] != 0.0:
            group["weight_decay"] = wd
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    grads = _grad_norms(model)
    if not all(math.isfinite(g) for g in grads.values()):
        _dump_diagnostics(diagnostics, state.step, parts.as_dict(), grads)
        raise NumericalError(f"non-finite gradient at step {state.step}")
    state.optimizer.step()

    # (8) EMA teacher
    ema_update(model.teacher, model.student, lam)
    ema_update(model.teacher_head, model.student_head, lam)
    state.bank = bank
    state.step += 1
    return state, parts


# --------------------------------------------------------------------------- data


class PairSampler:
    """Deterministic SLM pairs: image ``i`` in epoch ``e`` uses draw ``e mod N``."""

    def __init__(self, images: np.ndarray, cfg: TrainConfig):
        self.images = np.asarray(images, dtype=np.float64)
        self.cfg = cfg
        self.slm_cfg = cfg.slm_config()
        self.foregrounds = [otsu_binarize(im)[1] for im in self.images]

    def __len__(self) -> int:
        return len(self.images)

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch, 0xE9]))
        return rng.permutation(len(self.images))

    def pair(self, index: int, draw: int):
        image = self.images[index]
        mask = draw_slm(image, sample_rng(self.cfg.seed, index, draw), self.slm_cfg, self.foregrounds[index])
        return image, apply_slm(image, mask), mask, tokenize_mask(mask, self.cfg.backbone.patch)

    def batch(self, epoch: int, batch_index: int) -> Batch:
        b = self.cfg.batch_size
        idx = self.order(epoch)[batch_index * b:(batch_index + 1) * b]
        draw = epoch % self.cfg.n_slm
        items = [self.pair(int(i), draw) for i in idx]
        return Batch(*(np.stack(col) for col in zip(*items)))


# --------------------------------------------------------------------------- persistence


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    arrays = {}
    for name, t in state.model.state_dict().items():
        arrays[f"model.{name}"] = t.detach().cpu().numpy().astype(np.float32, copy=False)
    opt = state.optimizer.state_dict()
    for pid in sorted(opt["state"]):
        for key, val in sorted(opt["state"][pid].items()):
            arrays[f"optim.{pid}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    arrays["bank.prototypes"] = state.bank.prototypes
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": list(g["params"])}
              for g in opt["param_groups"]]
    meta = {
        "kind": "train_state",
        "config": state.cfg.to_dict(),
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "bank": {"momentum": state.bank.momentum, "step": state.bank.step},
        "optimizer": {"param_groups": groups},
    }
    return ckpt.write_container(path, meta, arrays)


def load_checkpoint(path: str | Path) -> TrainState:
    meta, arrays = ckpt.read_container(path)
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        state = init_state(cfg, int(meta["steps_per_epoch"]))
        model_sd = {k[len("model."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")}
        state.model.load_state_dict(model_sd, strict=True)
        opt_state: dict = {}
        for k, v in arrays.items():
            if k.startswith("optim."):
                _, pid, key = k.split(".", 2)
                opt_state.setdefault(int(pid), {})[key] = torch.from_numpy(v)
        state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["optimizer"]["param_groups"]})
        state.bank = PrototypeBank(arrays["bank.prototypes"], meta["bank"]["momentum"], int(meta["bank"]["step"]))
        state.step = int(meta["step"])
        torch.set_rng_state(torch.from_numpy(arrays["rng.torch"]))
    except (KeyError, ValueError, RuntimeError) as exc:
        raise PersistenceError(f"{path}: checkpoint content does not match this model: {exc}") from exc
    return state


# --------------------------------------------------------------------------- loop


class PretrainResult(NamedTuple):
    checkpoint: Path
    metrics: Path
    state: TrainState


def _format_row(values) -> str:
    return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in values)


def _prepare_log(path: Path, keep_steps: int) -> None:
    header = ",".join(METRICS_COLUMNS)
    lines = []
    if keep_steps > 0 and path.exists():
        lines = path.read_text().splitlines()[1:keep_steps + 1]
        if len(lines) < keep_steps:
            log.warning("metrics log %s has %d rows, checkpoint is at step %d", path, len(lines), keep_steps)
    path.write_text("\n".join([header] + lines) + "\n")


def pretrain(
    images: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    progress=None,
) -> PretrainResult:
    """Run (or resume) pre-training on an (n, H, W) stack of normal images.

    Writes ``metrics.csv`` (one row per step), ``checkpoint.ckpt`` every
    ``cfg.checkpoint_every`` epochs and at the end. ``max_steps`` stops early
    after that many global steps (a checkpoint is written there).
    """
    cfg.validate()
    images = np.asarray(images)
    if len(images) < cfg.batch_size:
        raise ConfigurationError(f"dataset has {len(images)} images, fewer than batch size {cfg.batch_size}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create {out}: {exc}") from exc
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "checkpoint.ckpt"
    spe = steps_per_epoch(len(images), cfg.batch_size)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.steps_per_epoch != spe:
            raise ConfigurationError(
                f"checkpoint expects {state.steps_per_epoch} steps per epoch, dataset gives {spe}"
            )
        # extra epochs on resume (e.g. target adaptation) extend the schedules
        if cfg.epochs != state.cfg.epochs:
            state.cfg = state.cfg.replace(epochs=cfg.epochs)
            state.schedules = make_schedules(state.cfg, spe)
    else:
        state = init_state(cfg, spe)
    _prepare_log(metrics_path, state.step)

    sampler = PairSampler(images, state.cfg)
    stop = state.total_steps if max_steps is None else min(max_steps, state.total_steps)
    diagnostics = out / "diagnostics.json"
    with open(metrics_path, "a") as fh:
        while state.step < stop:
            epoch, bidx = divmod(state.step, spe)
            batch = sampler.batch(epoch, bidx)
            lr, wd, tau_t, lam = state.schedules.at(state.step)
            step = state.step
            state, parts = train_step(state, batch, diagnostics)
            fh.write(_format_row((step, epoch, parts.l_stru, parts.l_cate, parts.l_recon, parts.l_total,
                                  lr, wd, tau_t, lam)) + "\n")
            fh.flush()
            if progress is not None:
                progress(step, parts)
            if state.step % spe == 0 and (state.epoch % state.cfg.checkpoint_every == 0):
                save_checkpoint(state, ckpt_path)
    if not ckpt_path.exists() or load_step(ckpt_path) != state.step:
        save_checkpoint(state, ckpt_path)
    return PretrainResult(ckpt_path, metrics_path, state)


def load_step(path: str | Path) -> int:
    meta, _ = ckpt.read_container(path)
    return int(meta["step"])


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a metrics log into columns; a truncated final line is ignored."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        return {c: np.array([]) for c in METRICS_COLUMNS}
    cols = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(cols):
            continue
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            continue
    data = np.array(rows, dtype=np.float64).reshape(-1, len(cols))
    return {c: data[:, i] for i, c in enumerate(cols)}
