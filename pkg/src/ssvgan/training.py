"""Adversarial training with the transformation-classification auxiliary task.

Per step: one discriminator update (logistic real/fake loss plus beta times
the transform-classification loss on transformed real clips), then one
generator update (non-saturating fake loss plus alpha times the transform
loss on transformed fakes, regenerated for this step). The adversarial head
only ever sees untransformed clips.

With alpha == beta == 0 the auxiliary path is skipped entirely, including
its RNG draws, so a run degenerates to a plain GAN bit for bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import synthdata, transforms
from .errors import ConfigurationError, NumericError, ParameterError
from .models import Discriminator, Generator, build_models, load_checkpoint, save_checkpoint
from .synthdata import DatasetManifest
from .transforms import FAMILIES, NUM_CLASSES

METRIC_KEYS = ("epoch", "adversarial_g", "adversarial_d", "aux_g", "aux_d",
               "total_g", "total_d", "aux_accuracy", "wall_seconds")


@dataclass
class TrainConfig:
    """Hyperparameters of one pretraining run."""

    families: tuple[str, ...] = FAMILIES
    alpha: float = 0.25          # generator auxiliary weight
    beta: float = 1.0            # discriminator auxiliary weight
    g_lr: float = 1e-4
    d_lr: float = 4e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 64
    z_dim: int = 128
    seed: int = 0
    checkpoint_every: int = 10
    holdback_fraction: float = 0.05   # pretrain slice reserved for aux accuracy

    def __post_init__(self):
        self.families = tuple(self.families)

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"auxiliary weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ConfigurationError(f"learning rates must be > 0, got g_lr={self.g_lr}, d_lr={self.d_lr}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigurationError(f"adam betas must lie in (0, 1), got ({self.adam_beta1}, {self.adam_beta2})")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.holdback_fraction <= 0.5:
            raise ConfigurationError(f"holdback_fraction must be in [0, 0.5], got {self.holdback_fraction}")
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ConfigurationError(f"unknown transform families: {sorted(unknown)}")
        if (self.alpha > 0 or self.beta > 0) and not self.families:
            raise ConfigurationError("auxiliary weights are non-zero but no transform family is enabled")


@dataclass
class LossBreakdown:
    adversarial_g: float
    adversarial_d: float
    aux_g: float
    aux_d: float
    total_g: float
    total_d: float


def adversarial_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """Logistic GAN terms: (discriminator term, non-saturating generator term)."""
    d_term = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    g_term = F.softplus(-fake_logits).mean()
    return d_term, g_term


def aux_transform_loss(logits: torch.Tensor, labels: torch.Tensor,
                       enabled_mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy with the softmax restricted to the enabled classes.

    Disabled classes are excluded from the partition function, so their
    logits receive no gradient and do not affect the loss.
    """
    if logits.dim() != 2 or logits.shape[1] != enabled_mask.shape[0]:
        raise ParameterError(f"logits shape {tuple(logits.shape)} does not match mask of {enabled_mask.shape[0]} classes")
    if not bool(enabled_mask.any()):
        raise ConfigurationError("enabled_mask must enable at least one class")
    if bool((~enabled_mask[labels]).any()):
        bad = labels[~enabled_mask[labels]][0].item()
        raise ParameterError(f"label {bad} is not in the enabled class set")
    masked = logits.masked_fill(~enabled_mask, float("-inf"))
    logp = F.log_softmax(masked, dim=1)
    return -logp[torch.arange(len(labels)), labels].mean()


def _transform_clips(clips: torch.Tensor, families, rng: np.random.Generator):
    """Sample one transform per clip and apply it; returns (clips, label ids)."""
    frames, side = clips.shape[1], clips.shape[-1]
    out = []
    ids = []
    for i in range(clips.shape[0]):
        label = transforms.sample_transform(families, rng, frames, side)
        out.append(transforms.apply(label, clips[i]))
        ids.append(label.class_id)
    return torch.stack(out), torch.as_tensor(ids, dtype=torch.long)


def make_ssl_batch(real_batch, fake_batch, config: TrainConfig, rng: np.random.Generator):
    """Transform a real and a fake batch for the auxiliary task.

    Consumes the rng deterministically: real clips first (in batch order),
    then fake clips. Returns (t_real, real_labels, t_fake, fake_labels).
    """
    real = torch.as_tensor(real_batch)
    fake = torch.as_tensor(fake_batch)
    t_real, real_labels = _transform_clips(real, config.families, rng)
    t_fake, fake_labels = _transform_clips(fake, config.families, rng)
    return t_real, real_labels, t_fake, fake_labels


def _check_finite(breakdown: LossBreakdown) -> None:
    for name, value in asdict(breakdown).items():
        if not math.isfinite(value):
            raise NumericError(f"loss {name} became non-finite ({value})")


def train_step(gen: Generator, disc: Discriminator,
               g_opt: torch.optim.Optimizer, d_opt: torch.optim.Optimizer,
               real_batch: torch.Tensor, config: TrainConfig,
               noise_gen: torch.Generator, transform_rng: np.random.Generator) -> LossBreakdown:
    """One discriminator update followed by one generator update."""
    n = real_batch.shape[0]
    use_aux_d = config.beta > 0
    use_aux_g = config.alpha > 0
    mask = transforms.class_mask(config.families) if (use_aux_d or use_aux_g) else None
    gen.train()
    disc.train()

    # discriminator update; fakes are constants here
    z = torch.randn(n, config.z_dim, generator=noise_gen)
    with torch.no_grad():
        fake = gen(z)
    if use_aux_d:
        t_real, real_labels = _transform_clips(real_batch, config.families, transform_rng)
        d_in = torch.cat([real_batch, fake, t_real])
    else:
        d_in = torch.cat([real_batch, fake])
    out = disc(d_in)
    adv_d, _ = adversarial_losses(out.adv_logit[:n], out.adv_logit[n:2 * n])
    aux_d = aux_transform_loss(out.transform_logits[2 * n:], real_labels, mask) if use_aux_d \
        else torch.zeros(())
    total_d = adv_d + config.beta * aux_d
    d_opt.zero_grad()
    total_d.backward()
    d_opt.step()

    # generator update on fresh fakes; gradients flow through the transforms
    z = torch.randn(n, config.z_dim, generator=noise_gen)
    fake = gen(z)
    if use_aux_g:
        t_fake, fake_labels = _transform_clips(fake, config.families, transform_rng)
        g_in = torch.cat([fake, t_fake])
    else:
        g_in = fake
    out = disc(g_in)
    adv_g = F.softplus(-out.adv_logit[:n]).mean()
    aux_g = aux_transform_loss(out.transform_logits[n:], fake_labels, mask) if use_aux_g \
        else torch.zeros(())
    total_g = adv_g + config.alpha * aux_g
    g_opt.zero_grad()
    total_g.backward()
    g_opt.step()

    breakdown = LossBreakdown(
        adversarial_g=adv_g.item(), adversarial_d=adv_d.item(),
        aux_g=aux_g.item(), aux_d=aux_d.item(),
        total_g=total_g.item(), total_d=total_d.item(),
    )
    _check_finite(breakdown)
    return breakdown


def aux_head_accuracy(disc: Discriminator, clips: np.ndarray, families,
                      rng: np.random.Generator, batch_size: int = 64) -> float:
    """Top-1 accuracy of the transform head on freshly transformed clips.

    Predictions are restricted to the enabled classes, mirroring the
    masked softmax used in training.
    """
    mask = transforms.class_mask(families)
    disc.eval()
    hits = 0
    with torch.inference_mode():
        for start in range(0, len(clips), batch_size):
            batch = torch.as_tensor(clips[start:start + batch_size])
            t_batch, labels = _transform_clips(batch, families, rng)
            logits = disc(t_batch).transform_logits
            logits = logits.masked_fill(~mask, float("-inf"))
            hits += int((logits.argmax(dim=1) == labels).sum())
    return hits / len(clips)


def _weights_finite(gen: Generator, disc: Discriminator) -> None:
    for model_name, model in (("generator", gen), ("discriminator", disc)):
        for name, param in model.named_parameters():
            if not bool(torch.isfinite(param).all()):
                raise NumericError(f"{model_name} weight {name} became non-finite")


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics: list[dict] = field(default_factory=list)
    out_dir: Path | None = None


def _metrics_row(epoch: int, means: LossBreakdown, aux_accuracy, wall: float) -> dict:
    return {
        "epoch": epoch,
        "adversarial_g": means.adversarial_g,
        "adversarial_d": means.adversarial_d,
        "aux_g": means.aux_g,
        "aux_d": means.aux_d,
        "total_g": means.total_g,
        "total_d": means.total_d,
        "aux_accuracy": aux_accuracy,
        "wall_seconds": wall,
    }


def _save_state(path: Path, epoch: int, gen, disc, g_opt, d_opt, config: TrainConfig,
                model_cfg: dict, noise_gen: torch.Generator, rng: np.random.Generator) -> None:
    cfg = asdict(config)
    cfg["families"] = list(config.families)
    save_checkpoint(path, {
        "epoch": epoch,
        "model": model_cfg,
        "config": cfg,
        "generator": gen.state_dict(),
        "discriminator": disc.state_dict(),
        "g_opt": g_opt.state_dict(),
        "d_opt": d_opt.state_dict(),
        "noise_rng": noise_gen.get_state(),
        "np_rng": rng.bit_generator.state,
    })


def _truncate_metrics(path: Path, max_epoch: int) -> None:
    if not path.exists():
        return
    kept = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if json.loads(line)["epoch"] <= max_epoch:
            kept.append(line)
    path.write_text("".join(row + "\n" for row in kept))


def train(manifest: DatasetManifest, config: TrainConfig, out_dir,
          resume=None) -> TrainResult:
    """Pretrain on the manifest's pretrain split, logging one metrics row per epoch.

    Writes checkpoints/epoch_XXXX.pt every config.checkpoint_every epochs and
    at the end; metrics.jsonl gets one JSON object per epoch with wall_seconds
    as its final key. Fully deterministic in config.seed apart from the
    wall_seconds values. Passing resume=<checkpoint> continues that run's
    trajectory exactly.
    """
    config.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    shape = manifest.shape
    model_cfg = {"frames": shape[0], "channels": shape[1], "side": shape[2],
                 "z_dim": config.z_dim, "n_classes": NUM_CLASSES}
    clips, _ = synthdata.load_split(manifest, "pretrain")
    if len(clips) == 0:
        raise ConfigurationError("pretrain split is empty")

    gen, disc = build_models(frames=shape[0], channels=shape[1], side=shape[2],
                             z_dim=config.z_dim, init_seed=config.seed)
    g_opt = torch.optim.Adam(gen.parameters(), lr=config.g_lr,
                             betas=(config.adam_beta1, config.adam_beta2))
    d_opt = torch.optim.Adam(disc.parameters(), lr=config.d_lr,
                             betas=(config.adam_beta1, config.adam_beta2))
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    # held-back pretrain slice, used only to measure transform-head accuracy
    order = rng.permutation(len(clips))
    n_held = int(round(len(clips) * config.holdback_fraction))
    held = clips[order[:n_held]]
    pool = clips[order[n_held:]]
    if config.batch_size > len(pool):
        raise ConfigurationError(
            f"batch_size {config.batch_size} exceeds the {len(pool)}-clip training pool"
        )

    start_epoch = 0
    metrics: list[dict] = []
    if resume is not None:
        payload = load_checkpoint(resume)
        stored = payload.get("config", {})
        for key in ("seed", "alpha", "beta", "batch_size", "z_dim"):
            if stored.get(key) != getattr(config, key):
                raise ConfigurationError(
                    f"resume config mismatch on {key}: checkpoint has {stored.get(key)!r}, "
                    f"requested {getattr(config, key)!r}"
                )
        if tuple(stored.get("families", ())) != config.families:
            raise ConfigurationError("resume config mismatch on families")
        gen.load_state_dict(payload["generator"])
        disc.load_state_dict(payload["discriminator"])
        g_opt.load_state_dict(payload["g_opt"])
        d_opt.load_state_dict(payload["d_opt"])
        noise_gen.set_state(payload["noise_rng"])
        rng.bit_generator.state = payload["np_rng"]
        start_epoch = int(payload["epoch"])
        _truncate_metrics(metrics_path, start_epoch)
        if metrics_path.exists():
            metrics = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
    else:
        metrics_path.write_text("")

    steps = len(pool) // config.batch_size
    last_path = ckpt_dir / f"epoch_{start_epoch:04d}.pt"
    if config.epochs == 0 or start_epoch >= config.epochs:
        _save_state(last_path, start_epoch, gen, disc, g_opt, d_opt, config, model_cfg, noise_gen, rng)
        return TrainResult(checkpoint_path=last_path, metrics=metrics, out_dir=out_dir)

    with open(metrics_path, "a") as metrics_file:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(pool))
            sums = np.zeros(6)
            for s in range(steps):
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                batch = torch.as_tensor(pool[idx])
                b = train_step(gen, disc, g_opt, d_opt, batch, config, noise_gen, rng)
                sums += (b.adversarial_g, b.adversarial_d, b.aux_g, b.aux_d, b.total_g, b.total_d)
            means = LossBreakdown(*(float(x) for x in sums / steps))
            if config.families and len(held) > 0:
                eval_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1000 + epoch]))
                aux_acc = aux_head_accuracy(disc, held, config.families, eval_rng,
                                            batch_size=config.batch_size)
            else:
                aux_acc = None
            row = _metrics_row(epoch, means, aux_acc, time.perf_counter() - t0)
            metrics.append(row)
            metrics_file.write(json.dumps(row) + "\n")
            metrics_file.flush()
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                _weights_finite(gen, disc)
                last_path = ckpt_dir / f"epoch_{epoch:04d}.pt"
                _save_state(last_path, epoch, gen, disc, g_opt, d_opt, config, model_cfg, noise_gen, rng)

    return TrainResult(checkpoint_path=last_path, metrics=metrics, out_dir=out_dir)
