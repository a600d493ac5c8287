"""Multi-task training under three regimes: baseline, blend guidance, and
dictionary-based proxy fusion.

The regimes differ only in what the bottleneck sees during a step. Baseline
never gets a privileged image. The blend regime encodes the ground truth and
mixes its bottleneck features in under a decaying coefficient; once the
schedule hits zero the privileged encoder pass is skipped entirely, so late
steps are bit-identical to baseline steps. The proxy regime draws a mode per
step: a bypass step with probability p_nopi (this is what trains the no-PI
pathway used for the first inference pass), a detached self-output step with
probability p_selfpi after a warmup fraction, and a ground-truth-PI step
otherwise.

Determinism contract: fixed seed + single thread => byte-identical
checkpoints and logs. All randomness flows through named substreams of the
config seed; torch's global RNG is never consulted after construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .backbone import BackboneConfig
from .checkpoint import Checkpoint
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .evalkit import psnr
from .privfusion import AlphaSchedule, alpha_at
from .restore import RestorationModel, to_image
from .substrate import apply_thread_cap, derive_seed, substream_rng

REGIMES = ("baseline", "pl", "sipl")
_FUSION_FOR_REGIME = {"baseline": "none", "pl": "blend", "sipl": "proxy"}


@dataclass
class TrainConfig:
    regime: str = "sipl"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_min: float = 1e-6
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    p_nopi: float = 0.3
    p_selfpi: float = 0.0
    selfpi_warmup: float = 0.8
    fusion_lr_mult: float = 1.0
    seed: int = 0
    base_channels: int = 16
    n_scales: int = 3
    blocks_per_scale: int = 2
    n_dict_entries: int = 64
    n_heads: int = 1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        for name in ("p_nopi", "p_selfpi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.p_nopi + self.p_selfpi > 1.0 + 1e-12:
            raise ConfigError("p_nopi + p_selfpi must not exceed 1")
        if not 0.0 <= self.selfpi_warmup <= 1.0:
            raise ConfigError("selfpi_warmup must be in [0,1]")
        if self.fusion_lr_mult <= 0.0:
            raise ConfigError("fusion_lr_mult must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_schedule"] = asdict(self.alpha_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("alpha_schedule"), dict):
            d["alpha_schedule"] = AlphaSchedule(**d["alpha_schedule"])
        return cls(**d)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(base_channels=self.base_channels, n_scales=self.n_scales,
                              blocks_per_scale=self.blocks_per_scale)


def build_model(cfg: TrainConfig) -> RestorationModel:
    return RestorationModel(cfg.backbone_config(),
                            fusion_mode=_FUSION_FOR_REGIME[cfg.regime],
                            n_dict_entries=cfg.n_dict_entries, n_heads=cfg.n_heads,
                            init_seed=derive_seed(cfg.seed, "init"))


def build_optimizer(model, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam over all parameters; the fusion block gets lr * fusion_lr_mult.

    The boost matters because the fused branch sits behind a zero-initialized
    output projection: at init every gradient path into the dictionary and
    its projections passes through that zero matrix, so the whole branch
    starts in a saddle that plain lr escapes very slowly."""
    if model.fusion is None or cfg.fusion_lr_mult == 1.0:
        return torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    fusion_ids = {id(p) for p in model.fusion.parameters()}
    base = [p for p in model.parameters() if id(p) not in fusion_ids]
    fused = [p for p in model.parameters() if id(p) in fusion_ids]
    return torch.optim.Adam(
        [{"params": base, "lr": cfg.lr},
         {"params": fused, "lr": cfg.lr * cfg.fusion_lr_mult}],
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def loss_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


@dataclass
class StepReport:
    loss: float
    mode: str
    alpha: float
    lr: float


def draw_mode(cfg: TrainConfig, epoch: int, rng: np.random.Generator) -> tuple:
    """Returns (mode, alpha) for one step. Only the sipl regime consumes rng,
    and it always draws exactly once so the stream stays aligned."""
    if cfg.regime == "baseline":
        return "none", 0.0
    if cfg.regime == "pl":
        return "blend", alpha_at(cfg.alpha_schedule, epoch, cfg.epochs)
    u = rng.random()
    if u < cfg.p_nopi:
        return "none", 0.0
    past_warmup = cfg.epochs > 0 and epoch >= cfg.selfpi_warmup * cfg.epochs
    if u < cfg.p_nopi + cfg.p_selfpi and past_warmup:
        return "self", 0.0
    return "gt", 0.0


def _stack(pairs: list, attr: str) -> torch.Tensor:
    arr = np.stack([getattr(p, attr).transpose(2, 0, 1) for p in pairs])
    return torch.from_numpy(arr).float()


def train_step(model: RestorationModel, batch: list, cfg: TrainConfig, epoch: int,
               optimizer: torch.optim.Optimizer | None = None,
               mode_rng: np.random.Generator | None = None) -> StepReport:
    """One optimization step on a batch of SamplePairs."""
    if optimizer is None:
        optimizer = build_optimizer(model, cfg)
    if mode_rng is None:
        mode_rng = substream_rng(cfg.seed, "modes")
    i_d = _stack(batch, "degraded")
    i_gt = _stack(batch, "clean")
    mode, alpha = draw_mode(cfg, epoch, mode_rng)

    if mode == "none":
        out = model.forward_batch(i_d)
    elif mode == "blend":
        out = model.forward_batch(i_d, i_gt, alpha=alpha)
    elif mode == "gt":
        out = model.forward_batch(i_d, i_gt)
    else:  # self: detached pseudo-privileged image from the current model
        with torch.no_grad():
            pseudo = model.forward_batch(i_d).clamp_(0.0, 1.0)
        out = model.forward_batch(i_d, pseudo)

    loss = loss_l1(out, i_gt)
    if not torch.isfinite(loss):
        raise NonFiniteLoss("training loss is not finite", diagnostics={
            "epoch": epoch, "mode": mode, "alpha": alpha,
            "loss": float(loss.item()),
            "lr": optimizer.param_groups[0]["lr"],
            "input_min": float(i_d.min()), "input_max": float(i_d.max()),
            "param_absmax": max(float(p.detach().abs().max()) for p in model.parameters()),
        })
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepReport(loss=float(loss.item()), mode=mode, alpha=alpha,
                      lr=float(optimizer.param_groups[0]["lr"]))


class TaskBalancedSampler:
    """Per epoch: task slots are split as evenly as possible (counts differ by
    at most 1), shuffled, and each slot pulls the next sample from that task's
    own reshuffling cycle."""

    def __init__(self, pairs_by_task: dict, rng: np.random.Generator):
        if not pairs_by_task:
            raise ConfigError("no training samples")
        self.pairs_by_task = {t: list(v) for t, v in sorted(pairs_by_task.items())}
        self.rng = rng
        self._cursors = {t: [] for t in self.pairs_by_task}

    def _next_from(self, task):
        if not self._cursors[task]:
            idx = self.rng.permutation(len(self.pairs_by_task[task]))
            self._cursors[task] = list(idx[::-1])  # pop from the end
        return self.pairs_by_task[task][self._cursors[task].pop()]

    def epoch_samples(self) -> list:
        tasks = list(self.pairs_by_task)
        total = sum(len(v) for v in self.pairs_by_task.values())
        base, extra = divmod(total, len(tasks))
        counts = {t: base for t in tasks}
        for i in self.rng.permutation(len(tasks))[:extra]:
            counts[tasks[i]] += 1
        slots = [t for t in tasks for _ in range(counts[t])]
        order = self.rng.permutation(len(slots))
        return [self._next_from(slots[i]) for i in order]

    def epoch_batches(self, batch_size: int) -> list:
        samples = self.epoch_samples()
        return [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]


def _val_psnr(model: RestorationModel, val_pairs: list, task_names: list,
              batch_size: int = 8) -> dict:
    """Mean PSNR of the no-PI single pass over the val split, per task."""
    model.eval()
    per_task = {}
    with torch.no_grad():
        for i in range(0, len(val_pairs), batch_size):
            chunk = val_pairs[i:i + batch_size]
            out = model.forward_batch(_stack(chunk, "degraded"))
            for j, pair in enumerate(chunk):
                img = np.clip(to_image(out[j]), 0.0, 1.0)
                name = task_names[pair.task_id]
                per_task.setdefault(name, []).append(psnr(img, pair.clean))
    model.train()
    result = {t: float(np.mean(v)) for t, v in sorted(per_task.items())}
    result["mean"] = float(np.mean([p for v in per_task.values() for p in v]))
    return result


def fit(cfg: TrainConfig, corpus, out_dir: str) -> Checkpoint:
    """Train per config on the corpus; writes best.ckpt, final.ckpt and
    train_log.jsonl under out_dir and returns the final checkpoint.

    Best is selected by mean val PSNR of the no-PI pass (the pathway every
    regime shares at deployment). Fully deterministic for a fixed seed.
    """
    apply_thread_cap()
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(cfg.epochs, 1), eta_min=cfg.lr_min)

    pairs_by_task = {}
    for pair in corpus.iter_pairs("train"):
        pairs_by_task.setdefault(pair.task_id, []).append(pair)
    val_pairs = list(corpus.iter_pairs("val"))
    task_names = corpus.task_names

    sampler_rng = substream_rng(cfg.seed, "sampler")
    mode_rng = substream_rng(cfg.seed, "modes")
    sampler = TaskBalancedSampler(pairs_by_task, sampler_rng)

    snapshot = {"model": model.build_config(), "train": cfg.to_dict(),
                "corpus_meta": corpus.meta}

    def rng_state():
        return {"sampler": sampler_rng.bit_generator.state,
                "modes": mode_rng.bit_generator.state}

    def make_ckpt(epoch):
        return Checkpoint.from_model(model, snapshot, epoch, rng_state(), optimizer)

    best_psnr = -np.inf
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")

        for epoch in range(cfg.epochs):
            for step, batch in enumerate(sampler.epoch_batches(cfg.batch_size)):
                report = train_step(model, batch, cfg, epoch, optimizer, mode_rng)
                emit({"epoch": epoch, "step": step, "regime": cfg.regime,
                      "mode": report.mode, "alpha": report.alpha,
                      "loss": report.loss, "lr": report.lr})
            scheduler.step()
            val = _val_psnr(model, val_pairs, task_names, cfg.batch_size)
            emit({"epoch": epoch, "val_psnr": val})
            if val["mean"] > best_psnr:
                best_psnr = val["mean"]
                make_ckpt(epoch).save(os.path.join(out_dir, "best.ckpt"))

    final = make_ckpt(cfg.epochs)
    final.save(os.path.join(out_dir, "final.ckpt"))
    if not os.path.exists(os.path.join(out_dir, "best.ckpt")):
        final.save(os.path.join(out_dir, "best.ckpt"))
    return final


def read_log(out_dir: str) -> list:
    with open(os.path.join(out_dir, "train_log.jsonl"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
