"""Adversarial training: configuration, schedule, steps and checkpoints."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import yaml

from .data import TRIPLET_STREAM, SampleConfig, collate, sample_rng
from .discriminator import PatchDiscriminator
from .generator import Generator
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    batch_triplet_loss,
    perceptual_and_style,
    reconstruction_loss,
    total_generator_loss,
    vgg19_features,
)
from .reference import triplet_indices
from .sketch import XDoGParams

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "scftcolor-ckpt-1"
LOG_COLUMNS = ("step", "epoch", "lr_g", "lr_d") + LossReport.FIELDS


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, sample_ids):
        super().__init__(f"{message}; offending samples (epoch, index): {sample_ids}")
        self.sample_ids = sample_ids


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    total_epochs: int = 200
    constant_lr_epochs: int = 100
    init_std: float = 0.02
    zero_ref_prob: float = 0.1
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    aggregation_mode: str = "scft"
    gan_loss: str = "lsgan"
    image_size: int = 256
    tps_grid: int = 5
    max_disp: float = 0.1
    jitter_amplitude: float = 50.0
    triplets_per_image: int = 64
    xdog: XDoGParams = field(default_factory=XDoGParams)
    checkpoint_every: int = 10
    vgg_weights: Optional[str] = None
    random_feature_net: bool = False
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.xdog, dict):
            self.xdog = XDoGParams(**self.xdog)
        if not 0 <= self.zero_ref_prob <= 1:
            raise ValueError(f"zero_ref_prob must lie in [0, 1], got {self.zero_ref_prob}")
        if self.constant_lr_epochs > self.total_epochs:
            raise ValueError("constant_lr_epochs must not exceed total_epochs")
        if self.gan_loss not in ("lsgan", "bce"):
            raise ValueError(f"gan_loss must be lsgan or bce, got {self.gan_loss!r}")

    @property
    def gamma(self):
        return self.loss_weights.gamma

    def sample_config(self):
        return SampleConfig(
            image_size=self.image_size,
            tps_grid=self.tps_grid,
            max_disp=self.max_disp,
            jitter_amplitude=self.jitter_amplitude,
            zero_ref_prob=self.zero_ref_prob,
            xdog=self.xdog,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# init and schedule


def init_weights(module, std=0.02, generator=None):
    """Conv/linear weights ~ N(0, std^2) with zero bias; batch-norm scales
    ~ N(1, std^2) with zero shift."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator) * std)
                m.bias.zero_()
    return module


def lr_at(epoch, cfg):
    """(lr_g, lr_d): constant, then linear decay to zero at ``total_epochs``."""
    if epoch < cfg.constant_lr_epochs:
        scale = 1.0
    else:
        span = cfg.total_epochs - cfg.constant_lr_epochs
        scale = 0.0 if span <= 0 else max(0.0, (cfg.total_epochs - epoch) / span)
    return cfg.lr_g * scale, cfg.lr_d * scale


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg, feature_net=None):
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.generator = init_weights(Generator(cfg.aggregation_mode), cfg.init_std, gen)
        self.discriminator = init_weights(PatchDiscriminator(), cfg.init_std, gen)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.lr_d, betas=betas)
        w = cfg.loss_weights
        if feature_net is None and (w.lambda_perc > 0 or w.lambda_style > 0):
            feature_net = vgg19_features(cfg.vgg_weights, cfg.random_feature_net, cfg.seed)
        self.feature_net = feature_net
        self.epoch = 0
        self.batch_in_epoch = 0
        self.step = 0
        self.best_rec = math.inf
        self.set_epoch(0)

    def set_epoch(self, epoch):
        self.epoch = epoch
        lr_g, lr_d = lr_at(epoch, self.cfg)
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        for group in self.opt_d.param_groups:
            group["lr"] = lr_d

    @property
    def lrs(self):
        return self.opt_g.param_groups[0]["lr"], self.opt_d.param_groups[0]["lr"]

    def sample_triplets(self, correspondences):
        out = []
        for b, gt in enumerate(correspondences):
            rng = sample_rng(self.cfg.seed, TRIPLET_STREAM, self.step, b)
            if not gt.valid.any():
                empty = np.zeros(0, dtype=np.int64)
                out.append((empty, empty, empty))
            else:
                out.append(triplet_indices(gt, self.cfg.triplets_per_image, rng))
        return out

    def train_step(self, batch):
        """One discriminator update followed by one generator update."""
        if not isinstance(batch, dict):
            batch = collate(batch)
        cfg, w = self.cfg, self.cfg.loss_weights
        sketch, ref, gt = batch["sketch"], batch["reference"], batch["ground_truth"]
        G, D = self.generator, self.discriminator
        G.train()
        D.train()

        out = G(sketch, ref)
        fake = out.image

        # discriminator
        for p in D.parameters():
            p.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d, _ = adversarial_losses(D(gt, sketch), D(fake.detach(), sketch), cfg.gan_loss)
        self._check(loss_d, "discriminator loss", batch)
        loss_d.backward()
        self.opt_d.step()

        # generator
        for p in D.parameters():
            p.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        zero = fake.new_zeros(())
        adv_g = adversarial_losses(zero, D(fake, sketch), cfg.gan_loss)[1] if w.lambda_adv > 0 else zero
        rec = reconstruction_loss(fake, gt)
        if self.feature_net is not None and (w.lambda_perc > 0 or w.lambda_style > 0):
            perc, style = perceptual_and_style(fake, gt, self.feature_net)
        else:
            perc, style = zero, zero
        if w.lambda_tr > 0:
            triplets = self.sample_triplets(batch["correspondence"])
            tr = batch_triplet_loss(
                G.scft.queries(out.sketch_values), G.scft.keys(out.reference_values), triplets, w.gamma
            )
        else:
            tr = zero
        total = total_generator_loss({"tr": tr, "rec": rec, "adv": adv_g, "perc": perc, "style": style}, w)
        self._check(total, "generator loss", batch)
        total.backward()
        self.opt_g.step()
        for p in D.parameters():
            p.requires_grad_(True)

        self.step += 1
        self.batch_in_epoch += 1
        return LossReport(
            tr=tr.item(), rec=rec.item(), adv_g=adv_g.item(), adv_d=loss_d.item(),
            perc=perc.item(), style=style.item(), total=total.item(),
        )

    @staticmethod
    def _check(value, what, batch):
        value = value.detach()
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"non-finite {what} ({value.item()})", batch.get("sample_id"))

    # -- checkpoints --------------------------------------------------------

    def state_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "step": self.step,
            "best_rec": self.best_rec,
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "config": self.cfg.to_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state):
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')!r}")
        self.generator.load_state_dict(state["generator"])
        self.discriminator.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.step = state["step"]
        self.batch_in_epoch = state["batch_in_epoch"]
        self.best_rec = state["best_rec"]
        self.set_epoch(state["epoch"])
        torch.set_rng_state(state["torch_rng"])

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    @classmethod
    def from_checkpoint(cls, path, feature_net=None):
        state = torch.load(path, map_location="cpu", weights_only=False)
        trainer = cls(TrainConfig.from_dict(state["config"]), feature_net)
        trainer.load_state_dict(state)
        return trainer


def load_generator(path):
    """Generator in eval mode from a training checkpoint."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a scftcolor checkpoint")
    cfg = TrainConfig.from_dict(state["config"])
    g = Generator(cfg.aggregation_mode)
    g.load_state_dict(state["generator"])
    return g.eval(), cfg


# ---------------------------------------------------------------------------
# loop


class LossLog:
    """Line-delimited ``step,epoch,lr_g,lr_d,tr,rec,adv_g,adv_d,perc,style,total``."""

    def __init__(self, path, append=False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self.fh = open(self.path, "a" if append else "w", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(LOG_COLUMNS)

    def write(self, step, epoch, lrs, report):
        self.writer.writerow([step, epoch, *[repr(float(x)) for x in lrs], *[repr(v) for v in report.as_row()]])
        self.fh.flush()

    def close(self):
        self.fh.close()


def run_training(trainer, source, out_dir=None, max_steps=None, shuffle=True, callback=None, prefetch=True):
    """Train until ``total_epochs`` (or ``max_steps`` more steps).

    Resumes from ``trainer.epoch`` / ``trainer.batch_in_epoch``; batches
    already consumed in the current epoch are skipped without being built.
    Checkpoints go to ``out_dir``: ``epoch_XXXX.pt`` every
    ``checkpoint_every`` epochs, ``best.pt`` on the best epoch-mean L_rec,
    and ``last.pt`` on exit.
    """
    from .data import Prefetcher

    cfg = trainer.cfg
    out_dir = Path(out_dir) if out_dir is not None else None
    logger = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logger = LossLog(out_dir / "losses.csv", append=trainer.step > 0)
    steps_done = 0
    reports = []
    try:
        while trainer.epoch < cfg.total_epochs:
            epoch = trainer.epoch
            trainer.set_epoch(epoch)
            skip = trainer.batch_in_epoch
            batches = _epoch_batches(source, epoch, cfg, shuffle, skip)
            if prefetch:
                batches = Prefetcher(batches)
            recs = []
            for samples in batches:
                report = trainer.train_step(collate(samples))
                recs.append(report.rec)
                reports.append(report)
                if logger:
                    logger.write(trainer.step, epoch, trainer.lrs, report)
                if callback:
                    callback(trainer, report)
                steps_done += 1
                if max_steps is not None and steps_done >= max_steps:
                    break
            else:
                trainer.batch_in_epoch = 0
                trainer.set_epoch(epoch + 1)
                if out_dir is not None:
                    if recs and float(np.mean(recs)) < trainer.best_rec:
                        trainer.best_rec = float(np.mean(recs))
                        trainer.save(out_dir / "best.pt")
                    if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                        trainer.save(out_dir / f"epoch_{epoch + 1:04d}.pt")
                continue
            break
    finally:
        if out_dir is not None:
            trainer.save(out_dir / "last.pt")
        if logger:
            logger.close()
    return reports


def _epoch_batches(source, epoch, cfg, shuffle, skip):
    order = source.epoch_order(epoch, shuffle)
    starts = list(range(0, len(order), cfg.batch_size))[skip:]
    for start in starts:
        samples = [s for s in source.build(epoch, order[start:start + cfg.batch_size], cfg.workers) if s is not None]
        if samples:
            yield samples


# ---------------------------------------------------------------------------
# desk-scale probes


@torch.no_grad()
def attention_match_rate(generator, source, epoch=10_000, indices=None):
    """Fraction of valid sketch positions whose attention argmax is the
    ground-truth positive, over fresh samples of ``source``."""
    generator.eval()
    hits = total = 0
    indices = range(len(source)) if indices is None else indices
    for i in indices:
        s = source.sample(epoch, i)
        if s is None or s.zero_reference:
            continue
        sk, ref, _ = s.tensors()
        out = generator(sk[None], ref[None])
        pred = out.attention[0].argmax(dim=-1).numpy()
        valid = s.correspondence.valid
        hits += int((pred[valid] == s.correspondence.positive_index[valid]).sum())
        total += int(valid.sum())
    return hits / max(total, 1)


@torch.no_grad()
def reconstruction_scores(generator, source, epoch=10_000, indices=None):
    """(mean L1 on the [-1, 1] scale, PSNR in dB on 0-255) against I_gt."""
    from .metrics import psnr_from_mse

    generator.eval()
    l1, sq, n = [], 0.0, 0
    indices = range(len(source)) if indices is None else indices
    for i in indices:
        s = source.sample(epoch, i)
        if s is None:
            continue
        sk, ref, gt = s.tensors()
        img = generator(sk[None], ref[None]).image[0]
        l1.append(float((img - gt).abs().mean()))
        out255 = (img.double() + 1) * 127.5
        gt255 = (gt.double() + 1) * 127.5
        sq += float(((out255 - gt255) ** 2).sum())
        n += out255.numel()
    return float(np.mean(l1)), psnr_from_mse(sq / n)
