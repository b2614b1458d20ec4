"""Losses, schedules and the alternating discriminator / generator optimisation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import load_checkpoint, optimizer_from_tensors, save_checkpoint
from .data import NormalizationStats, Sample, make_batches
from .errors import ConfigError, DimensionMismatch, NonFiniteLoss
from .model import Batch, ModelConfig, ZSMSTM, collate

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lambda", "lr", "L_dis", "L_rec", "L_adv", "L_total", "wall_ms")
VALID_COLUMNS = ("epoch", "step", "L_rec")


@dataclass
class TrainConfig:
    beta1: float = 0.95
    beta2: float = 0.999
    initial_lr: float = 1e-5
    warmup_steps: int = 20000
    epochs: int = 200
    batch_size: int = 24
    lambda_step: float = 0.01
    lambda_max: float = 1.0
    seed: int = 0
    epsilon_norm: float = 1e-8
    adam_eps: float = 1e-8
    train_discriminator: bool = True

    def validate(self) -> "TrainConfig":
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        for name in ("warmup_steps", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.initial_lr <= 0 or self.lambda_step < 0 or self.lambda_max < 0:
            raise ConfigError("learning rate and lambda settings must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- losses

def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def per_sample_l2(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return (a - b).reshape(a.shape[0], -1).norm(dim=1)


def loss_reconstruction(pred: Tensor, target: Tensor) -> Tensor:
    """Batch mean of the per-sample L2 norm of the flattened pose error."""
    return per_sample_l2(pred, target).mean()


def loss_discriminator(h_style_true: Tensor, h_style_pred: Tensor) -> Tensor:
    return per_sample_l2(h_style_true, h_style_pred).mean()


def normalize_style_error(errors: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Scale non-negative per-sample errors into [0, 1] by the batch maximum."""
    return errors / (errors.max() + epsilon)


def loss_adversarial(h_style_true: Tensor, h_style_pred: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Mean of (1 - normalized error)^2; zero when the discriminator is uniformly wrong."""
    e = normalize_style_error(per_sample_l2(h_style_true, h_style_pred), epsilon)
    return ((1.0 - e) ** 2).mean()


def loss_total(l_rec: Tensor | float, l_adv: Tensor | float, lam: float) -> Tensor | float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_rec + lam * l_adv


def lambda_at(step: int, cfg: TrainConfig = TrainConfig()) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return min(cfg.lambda_step * step, cfg.lambda_max)


def lr_at(step: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Linear warmup to initial_lr at warmup_steps, inverse square-root decay after."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return cfg.initial_lr * min(step / cfg.warmup_steps, (cfg.warmup_steps / step) ** 0.5)


# ---------------------------------------------------------------- trainer

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lam: float = 0.0
    lr: float = 0.0
    best_valid: float = float("inf")
    best_step: int = -1


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


class Trainer:
    """Owns the model, both Adam optimizers and the step counter."""

    def __init__(self, model: ZSMSTM, cfg: TrainConfig, stats: NormalizationStats | None = None):
        self.model = model
        self.cfg = cfg.validate()
        self.stats = stats
        self.state = TrainState()
        betas = (cfg.beta1, cfg.beta2)
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.initial_lr, betas=betas,
                                      eps=cfg.adam_eps)
        self.opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.initial_lr, betas=betas,
                                      eps=cfg.adam_eps)

    def _as_batch(self, batch) -> Batch:
        if isinstance(batch, Batch):
            return batch
        return collate(batch, dtype=next(self.model.parameters()).dtype)

    def train_step(self, batch: Batch | Sequence[Sample]) -> dict[str, float]:
        """One discriminator update followed by one encoder/generator update.

        The returned row is indexed by the 0-based step it performed, so its
        ``lambda`` equals ``lambda_at(row["step"])``; lr uses the 1-based count.
        """
        batch = self._as_batch(batch)
        model, cfg = self.model, self.cfg
        model.train()
        lam = lambda_at(self.state.step, cfg)
        lr = lr_at(self.state.step + 1, cfg)
        for opt in (self.opt_d, self.opt_g):
            for group in opt.param_groups:
                group["lr"] = lr

        # phase 1: discriminator on frozen encodings
        with torch.no_grad():
            h_content = model.encode_content(batch)
            h_style = model.encode_style(batch)
        l_dis = loss_discriminator(h_style, model.discriminate(h_content, batch.word_mask))
        if cfg.train_discriminator:
            self.opt_d.zero_grad(set_to_none=True)
            l_dis.backward()
            self.opt_d.step()

        # phase 2: encoders + generator, discriminator frozen
        d_params = model.discriminator_parameters()
        _set_requires_grad(d_params, False)
        try:
            pred, h_content, h_style = model(batch, teacher_forcing=True)
            l_rec = loss_reconstruction(pred, batch.pose)
            l_adv = loss_adversarial(h_style, model.discriminate(h_content, batch.word_mask), cfg.epsilon_norm)
            total = loss_total(l_rec, l_adv, lam)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
        finally:
            _set_requires_grad(d_params, True)
        scalars = {"L_dis": l_dis.item(), "L_rec": l_rec.item(), "L_adv": l_adv.item(), "L_total": total.item()}
        bad = [k for k, v in scalars.items() if not np.isfinite(v)]
        if bad:
            raise NonFiniteLoss(f"step {self.state.step}: non-finite {bad} ({scalars})")
        self.opt_g.step()

        step = self.state.step
        self.state.step += 1
        self.state.lam, self.state.lr = lam, lr
        return {"step": step, "lambda": lam, "lr": lr, **scalars}

    @torch.no_grad()
    def validate(self, samples: Sequence[Sample], batch_size: int | None = None) -> float:
        """Teacher-forced reconstruction loss only (lambda-free), averaged over samples."""
        self.model.eval()
        total, n = 0.0, 0
        bs = batch_size or self.cfg.batch_size
        for i in range(0, len(samples), bs):
            batch = self._as_batch(samples[i:i + bs])
            pred, _, _ = self.model(batch, teacher_forcing=True)
            total += float(loss_reconstruction(pred, batch.pose)) * batch.size
            n += batch.size
        return total / n

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"train_config": self.cfg.to_dict(), "state": asdict(self.state), **(extra or {})}
        save_checkpoint(path, self.model, self.stats, meta, {"d": self.opt_d, "g": self.opt_g})

    @classmethod
    def resume(cls, path: str | Path, cfg: TrainConfig | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        model = ckpt.build_model()
        trainer = cls(model, cfg or TrainConfig.from_dict(ckpt.meta["train_config"]), ckpt.stats)
        trainer.state = TrainState(**ckpt.meta["state"])
        opts = ckpt.meta["optimizers"]
        for prefix, opt in (("d", trainer.opt_d), ("g", trainer.opt_g)):
            if prefix in opts:
                optimizer_from_tensors(f"optim.{prefix}", opt, opts[prefix], ckpt.optim)
        return trainer


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def _append_csv(path: Path, columns: Sequence[str], row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def fit(trainer: Trainer, train: Sequence[Sample], valid: Sequence[Sample], out_dir: str | Path,
        epochs: int | None = None) -> TrainState:
    """Run epochs of train_step, logging every step; keeps ``best.ckpt`` and ``last.ckpt``.

    A trainer restored with ``Trainer.resume(out_dir / 'last.ckpt')`` continues
    from the next epoch with identical batches, schedules and optimizer moments.
    Samples must already be normalized.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = trainer.cfg
    epochs = epochs if epochs is not None else cfg.epochs
    # pre-collation keeps per-step cost down; collate is deterministic so this is equivalent
    dtype = next(trainer.model.parameters()).dtype
    indices = list(range(len(train)))
    while trainer.state.epoch < epochs:
        epoch = trainer.state.epoch
        for idx in make_batches(indices, cfg.batch_size, epoch_seed(cfg.seed, epoch)):
            t0 = time.perf_counter()
            row = trainer.train_step(collate([train[i] for i in idx], dtype=dtype))
            row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            _append_csv(out_dir / "metrics.csv", LOG_COLUMNS, row)
        trainer.state.epoch += 1
        if valid:
            v = trainer.validate(valid)
            _append_csv(out_dir / "valid.csv", VALID_COLUMNS,
                        {"epoch": trainer.state.epoch, "step": trainer.state.step, "L_rec": v})
            if v < trainer.state.best_valid:
                trainer.state.best_valid, trainer.state.best_step = v, trainer.state.step
                trainer.save(out_dir / "best.ckpt")
        trainer.save(out_dir / "last.ckpt")
        log.info("epoch %d step %d best_valid %.5f", trainer.state.epoch, trainer.state.step,
                 trainer.state.best_valid)
    if not valid:
        trainer.save(out_dir / "best.ckpt")
    return trainer.state


def read_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- gradient check

@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    n_checked: dict[str, int]
    adv_disc_grad_max: float
    dis_encoder_grad_max: float

    def ok(self, tol: float = 1e-4) -> bool:
        return (all(v <= tol for v in self.max_rel_error.values())
                and self.adv_disc_grad_max == 0.0 and self.dis_encoder_grad_max == 0.0)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_model=16, d_text=8, n_mels=16, patch_size=16, patch_stride=10, max_mel_frames=32,
                speech_layers=1, speech_heads=2, content_att_heads=4, style_att_heads=4,
                pose_lstm_layers=3, decoder_layers=1, decoder_heads=2, ff_mult=2, J=3, T=8)
    base.update(overrides)
    return ModelConfig(**base)


def _tiny_batch(cfg: ModelConfig, n: int, W: int, seed: int) -> list[Sample]:
    from .data import WordFeature

    rng = np.random.default_rng(seed)
    samples = []
    for b in range(n):
        cuts = np.sort(rng.choice(np.arange(1, cfg.T), size=W - 1, replace=False))
        bounds = np.concatenate([[0], cuts, [cfg.T]])
        words = [WordFeature(rng.normal(size=cfg.d_text).astype(np.float32),
                             rng.normal(size=(cfg.patch_size + int(rng.integers(0, 12)), cfg.n_mels)).astype(np.float32))
                 for _ in range(W)]
        samples.append(Sample(f"s{b}", words, rng.normal(0, 0.5, size=(cfg.T, 2 * cfg.J)).astype(np.float32),
                              [(int(s), int(e)) for s, e in zip(bounds[:-1], bounds[1:])]))
    return samples


def gradcheck(cfg: ModelConfig | None = None, n_samples: int = 3, W: int = 3, entries_per_tensor: int = 4,
              h: float = 1e-5, lam: float = 0.5, seed: int = 0, floor: float = 1e-5) -> GradcheckReport:
    """Compare autograd gradients with central differences at float64.

    For each loss path a random subset of ``entries_per_tensor`` coordinates of
    every parameter tensor on that path is perturbed by +-h. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor stops
    difference round-off (~1e-10 absolute at h=1e-5) on vanishing gradients
    from dominating the ratio.
    """
    cfg = cfg or tiny_config()
    torch.manual_seed(seed)
    model = ZSMSTM(cfg).double()
    batch = collate(_tiny_batch(cfg, n_samples, W, seed), dtype=torch.float64)
    rng = np.random.default_rng(seed)

    def rec_loss():
        pred, _, _ = model(batch, teacher_forcing=True)
        return loss_reconstruction(pred, batch.pose)

    def dis_loss():
        with torch.no_grad():
            hc = model.encode_content(batch)
            hs = model.encode_style(batch)
        return loss_discriminator(hs, model.discriminate(hc, batch.word_mask))

    def adv_loss():
        _, hc, hs = model(batch, teacher_forcing=True)
        return lam * loss_adversarial(hs, model.discriminate(hc, batch.word_mask))

    gen_names = [n for n, _ in model.named_parameters() if not n.startswith("discriminator.")]
    dis_names = [n for n, _ in model.named_parameters() if n.startswith("discriminator.")]
    params = dict(model.named_parameters())
    report = GradcheckReport({}, {}, 0.0, 0.0)

    for path, fn, names in (("L_rec", rec_loss, gen_names), ("L_dis", dis_loss, dis_names),
                            ("lambda*L_adv", adv_loss, gen_names)):
        frozen = dis_names if path == "lambda*L_adv" else []
        _set_requires_grad([params[n] for n in frozen], False)
        model.zero_grad(set_to_none=True)
        fn().backward()
        grads = {n: (params[n].grad.clone() if params[n].grad is not None else torch.zeros_like(params[n]))
                 for n in params}
        _set_requires_grad([params[n] for n in frozen], True)
        if path == "lambda*L_adv":
            report.adv_disc_grad_max = max(float(grads[n].abs().max()) for n in dis_names)
        if path == "L_dis":
            report.dis_encoder_grad_max = max(float(grads[n].abs().max()) for n in gen_names)
        worst, count = 0.0, 0
        with torch.no_grad():
            for n in names:
                p = params[n]
                flat = p.view(-1)
                k = min(entries_per_tensor, flat.numel())
                for i in rng.choice(flat.numel(), size=k, replace=False):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = fn().item()
                    flat[i] = orig - h
                    down = fn().item()
                    flat[i] = orig
                    num = (up - down) / (2 * h)
                    ana = grads[n].view(-1)[i].item()
                    err = abs(ana - num) / max(abs(ana), abs(num), floor)
                    worst = max(worst, err)
                    count += 1
        report.max_rel_error[path] = worst
        report.n_checked[path] = count
    return report
