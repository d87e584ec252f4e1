"""Alternating-update training loop for the dual-generator translator.

One step = one generator update (both adversarial directions + weighted cycle
and activation-reconstruction terms) followed by one update of each
discriminator against current reals and history-pool fakes. The feature
extractor used by the ARL term stays frozen throughout.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import torch

from . import losses, networks
from .data import DatasetManifest, ImageRecord, batch_to_images, load_batch
from .losses import LossReport, LossWeights
from .networks import (
    FeatureExtractor,
    Generator,
    PatchDiscriminator,
    build_discriminator,
    build_feature_extractor,
    build_generator,
    discriminator_spec,
    feature_extractor_spec,
    generator_spec,
    init_weights,
)
from PIL import Image


@dataclass
class TrainConfig:
    alpha: float = 10.0
    lam: float = 1.0
    epochs: int = 200
    decay_start_epoch: int = 100
    batch_size: int = 1
    base_lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    pool_size: int = 50
    seed: int = 0
    arl_layers: tuple[int, ...] = (0, 1, 2, 3)
    arl_direction: str = "forward"
    adv_form: str = "lsgan"
    image_size: int = 256
    gen_blocks: int = 9
    gen_width: int = 64
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.decay_start_epoch <= self.epochs) and self.epochs > 0:
            raise ValueError("decay_start_epoch must lie in (0, epochs]")
        if self.pool_size < 0:
            raise ValueError("pool_size must be non-negative")
        # validates layer/direction choices
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(
            alpha=self.alpha,
            lam=self.lam,
            arl_layers=tuple(self.arl_layers),
            arl_direction=self.arl_direction,
        )


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Constant until decay start, then linear to zero at the final epoch."""
    if epoch < 0 or epoch > config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    if epoch < config.decay_start_epoch:
        return config.base_lr
    span = config.epochs - config.decay_start_epoch
    if span == 0:
        return 0.0
    return config.base_lr * (config.epochs - epoch) / span


class ImagePool:
    """Fake-image history buffer; returns either the incoming fake or, with
    probability 1/2 once full, a randomly evicted stored one."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.images: list[torch.Tensor] = []

    def push(self, fake: torch.Tensor, rng: random.Random) -> torch.Tensor:
        fake = fake.detach()
        if self.capacity == 0:
            return fake
        if len(self.images) < self.capacity:
            self.images.append(fake.clone())
            return fake
        if rng.random() < 0.5:
            return fake
        i = rng.randrange(self.capacity)
        out = self.images[i]
        self.images[i] = fake.clone()
        return out

    def push_batch(self, fakes: torch.Tensor, rng: random.Random) -> torch.Tensor:
        return torch.stack([self.push(f, rng) for f in fakes])


def pool_push_sample(pool: ImagePool, fake: torch.Tensor, rng: random.Random) -> torch.Tensor:
    return pool.push(fake, rng)


@dataclass
class TrainState:
    config: TrainConfig
    g_ab: Generator
    g_ba: Generator
    d_a: PatchDiscriminator
    d_b: PatchDiscriminator
    feat: FeatureExtractor
    opt_g: torch.optim.Adam
    opt_d_a: torch.optim.Adam
    opt_d_b: torch.optim.Adam
    pool_a: ImagePool
    pool_b: ImagePool
    rng: random.Random
    epoch: int = 0
    step: int = 0
    steps_per_epoch: int = 0
    loss_history: list[LossReport] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    gen_spec = generator_spec(n_blocks=config.gen_blocks, width=config.gen_width)
    g_ab = init_weights(build_generator(gen_spec), seed=config.seed)
    g_ba = init_weights(build_generator(gen_spec), seed=config.seed + 1)
    d_a = init_weights(build_discriminator(discriminator_spec()), seed=config.seed + 2)
    d_b = init_weights(build_discriminator(discriminator_spec()), seed=config.seed + 3)
    feat = init_weights(build_feature_extractor(feature_extractor_spec()), seed=config.seed + 4)
    for p in feat.parameters():
        p.requires_grad_(False)
    opt_g = torch.optim.Adam(
        list(g_ab.parameters()) + list(g_ba.parameters()),
        lr=config.base_lr,
        betas=config.adam_betas,
    )
    opt_d_a = torch.optim.Adam(d_a.parameters(), lr=config.base_lr, betas=config.adam_betas)
    opt_d_b = torch.optim.Adam(d_b.parameters(), lr=config.base_lr, betas=config.adam_betas)
    return TrainState(
        config=config,
        g_ab=g_ab,
        g_ba=g_ba,
        d_a=d_a,
        d_b=d_b,
        feat=feat,
        opt_g=opt_g,
        opt_d_a=opt_d_a,
        opt_d_b=opt_d_b,
        pool_a=ImagePool(config.pool_size),
        pool_b=ImagePool(config.pool_size),
        rng=random.Random(config.seed),
    )


def _require_finite(value: torch.Tensor, term: str) -> None:
    if not torch.isfinite(value):
        raise FloatingPointError(f"non-finite loss term {term!r}: {value.item()!r}")


def _arl_term(state: TrainState, a, fake_b, b, fake_a, weights: LossWeights) -> torch.Tensor:
    layers = list(weights.arl_layers)
    term = None
    if weights.arl_direction in ("forward", "both"):
        term = losses.arl(state.feat.taps(a), state.feat.taps(fake_b), layers)
    if weights.arl_direction in ("backward", "both"):
        back = losses.arl(state.feat.taps(b), state.feat.taps(fake_a), layers)
        term = back if term is None else term + back
    return term


def train_step(
    state: TrainState, batch_a: torch.Tensor, batch_b: torch.Tensor, config: TrainConfig
) -> LossReport:
    if batch_a.shape[0] != batch_b.shape[0]:
        raise ValueError("domain batches must have equal size")
    weights = config.weights()
    lr = lr_at(min(state.epoch, config.epochs), config)
    for opt in (state.opt_g, state.opt_d_a, state.opt_d_b):
        for group in opt.param_groups:
            group["lr"] = lr

    # generator update
    fake_b = state.g_ab(batch_a)
    rec_a = state.g_ba(fake_b)
    fake_a = state.g_ba(batch_b)
    rec_b = state.g_ab(fake_a)
    g_adv_ab = losses.adversarial_loss_g(state.d_b(fake_b), form=config.adv_form)
    g_adv_ba = losses.adversarial_loss_g(state.d_a(fake_a), form=config.adv_form)
    cyc = losses.cycle_loss(batch_a, rec_a, batch_b, rec_b)
    _require_finite(g_adv_ab, "g_adv_AB")
    _require_finite(g_adv_ba, "g_adv_BA")
    _require_finite(cyc, "cycle")
    if weights.lam > 0:
        arl_term = _arl_term(state, batch_a, fake_b, batch_b, fake_a, weights)
        _require_finite(arl_term, "arl")
        arl_value = arl_term.item()
    else:
        arl_term = None
        arl_value = 0.0
    g_total = g_adv_ab + g_adv_ba + weights.alpha * cyc
    if arl_term is not None:
        g_total = g_total + weights.lam * arl_term
    state.opt_g.zero_grad()
    g_total.backward()
    state.opt_g.step()

    # discriminator updates against pool-sampled fakes
    pooled_a = state.pool_a.push_batch(fake_a.detach(), state.rng)
    pooled_b = state.pool_b.push_batch(fake_b.detach(), state.rng)
    d_a_loss = losses.adversarial_loss_d(
        state.d_a(batch_a), state.d_a(pooled_a), form=config.adv_form
    )
    _require_finite(d_a_loss, "d_A")
    state.opt_d_a.zero_grad()
    d_a_loss.backward()
    state.opt_d_a.step()

    d_b_loss = losses.adversarial_loss_d(
        state.d_b(batch_b), state.d_b(pooled_b), form=config.adv_form
    )
    _require_finite(d_b_loss, "d_B")
    state.opt_d_b.zero_grad()
    d_b_loss.backward()
    state.opt_d_b.step()

    report = losses.make_report(
        g_adv_ab.item(),
        g_adv_ba.item(),
        d_a_loss.item(),
        d_b_loss.item(),
        cyc.item(),
        arl_value,
        weights,
    )
    state.step += 1
    state.loss_history.append(report)
    return report


def _epoch_order(rng: random.Random, n_items: int, n_needed: int) -> list[int]:
    order: list[int] = []
    while len(order) < n_needed:
        perm = list(range(n_items))
        rng.shuffle(perm)
        order.extend(perm)
    return order[:n_needed]


def _checkpoint_extra(state: TrainState) -> dict:
    return {
        "config": asdict(state.config),
        "epoch": state.epoch,
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "opt_g": state.opt_g.state_dict(),
        "opt_d_a": state.opt_d_a.state_dict(),
        "opt_d_b": state.opt_d_b.state_dict(),
        "pool_a": state.pool_a.images,
        "pool_b": state.pool_b.images,
        "rng_state": state.rng.getstate(),
        "loss_history": [r.as_row() for r in state.loss_history],
    }


def save_state(state: TrainState, path) -> None:
    networks.save_checkpoint(
        path,
        {
            "g_ab": state.g_ab,
            "g_ba": state.g_ba,
            "d_a": state.d_a,
            "d_b": state.d_b,
            "feat": state.feat,
        },
        extra=_checkpoint_extra(state),
    )


def load_state(path) -> TrainState:
    nets, extra = networks.load_checkpoint(path)
    cfg_dict = dict(extra["config"])
    cfg_dict["adam_betas"] = tuple(cfg_dict["adam_betas"])
    cfg_dict["arl_layers"] = tuple(cfg_dict["arl_layers"])
    config = TrainConfig(**cfg_dict)
    state = init_state(config)
    state.g_ab.load_state_dict(nets["g_ab"].state_dict())
    state.g_ba.load_state_dict(nets["g_ba"].state_dict())
    state.d_a.load_state_dict(nets["d_a"].state_dict())
    state.d_b.load_state_dict(nets["d_b"].state_dict())
    state.feat.load_state_dict(nets["feat"].state_dict())
    state.opt_g.load_state_dict(extra["opt_g"])
    state.opt_d_a.load_state_dict(extra["opt_d_a"])
    state.opt_d_b.load_state_dict(extra["opt_d_b"])
    state.pool_a.images = [t.clone() for t in extra["pool_a"]]
    state.pool_b.images = [t.clone() for t in extra["pool_b"]]
    rng_state = extra["rng_state"]
    state.rng.setstate((rng_state[0], tuple(rng_state[1]), rng_state[2]))
    state.epoch = extra["epoch"]
    state.step = extra["step"]
    state.steps_per_epoch = extra.get("steps_per_epoch", 0)
    state.loss_history = [
        LossReport(**dict(zip(LossReport.CSV_FIELDS, row))) for row in extra["loss_history"]
    ]
    return state


def write_loss_history(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    per_epoch = max(1, state.steps_per_epoch)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "epoch"] + list(LossReport.CSV_FIELDS))
        for i, report in enumerate(state.loss_history):
            writer.writerow([i, i // per_epoch] + [f"{v:.10g}" for v in report.as_row()])


def train(
    domain_a: DatasetManifest,
    domain_b: DatasetManifest,
    config: TrainConfig,
    work_dir,
    resume_from=None,
    stop_after_epoch: int | None = None,
) -> TrainState:
    """Run the full schedule; checkpoints land in ``work_dir``.

    ``stop_after_epoch`` interrupts early without shortening the learning-rate
    schedule; a later call with ``resume_from`` picks up where it stopped.
    """
    recs_a = domain_a.subset(split="train")
    recs_b = domain_b.subset(split="train")
    if not recs_a or not recs_b:
        raise ValueError("both domains need non-empty train splits")
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    images_a = load_batch(recs_a, config.image_size)
    images_b = load_batch(recs_b, config.image_size)

    if resume_from is not None:
        state = load_state(resume_from)
        state.config = config
    else:
        state = init_state(config)

    n = max(len(recs_a), len(recs_b))
    steps_per_epoch = math.ceil(n / config.batch_size)
    state.steps_per_epoch = steps_per_epoch
    end_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    while state.epoch < end_epoch:
        order_a = _epoch_order(state.rng, len(recs_a), n)
        order_b = _epoch_order(state.rng, len(recs_b), n)
        for s in range(steps_per_epoch):
            lo = s * config.batch_size
            hi = min(lo + config.batch_size, n)
            batch_a = images_a[order_a[lo:hi]]
            batch_b = images_b[order_b[lo:hi]]
            train_step(state, batch_a, batch_b, config)
        state.epoch += 1
        if state.epoch % config.checkpoint_every == 0 or state.epoch == end_epoch:
            save_state(state, work_dir / f"checkpoint_epoch{state.epoch:04d}.pt")
            save_state(state, work_dir / "latest.pt")
            write_loss_history(state, work_dir / "loss_history.csv")
    if config.epochs == 0:
        save_state(state, work_dir / "latest.pt")
        write_loss_history(state, work_dir / "loss_history.csv")
    return state


def latest_checkpoint(work_dir) -> Path:
    path = Path(work_dir) / "latest.pt"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint under {work_dir}")
    return path


def translate(
    generator: torch.nn.Module,
    manifest: DatasetManifest | Sequence[ImageRecord],
    out_dir,
    target_label: str,
    target_domain: str = "B",
    image_size: int = 256,
    batch_size: int = 8,
    name_prefix: str = "syn",
) -> list[ImageRecord]:
    """Map every input through the generator and write PNGs; returned records
    carry the target domain's class label and synthetic origin."""
    records = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_records: list[ImageRecord] = []
    generator.eval()
    with torch.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo : lo + batch_size]
            outputs = generator(load_batch(chunk, image_size))
            for rec, img in zip(chunk, batch_to_images(outputs)):
                stem = Path(rec.path).stem
                path = out_dir / f"{name_prefix}_{len(out_records):05d}_{stem}.png"
                Image.fromarray(img).save(path)
                out_records.append(
                    ImageRecord(
                        str(path),
                        target_label,
                        domain=target_domain,
                        split=rec.split,
                        origin="synthetic",
                    )
                )
    generator.train()
    return out_records
