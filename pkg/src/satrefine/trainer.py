"""Adversarial refinement: the two losses, the alternating loop, and dataset
refinement.

The refiner is trained to fool the discriminator while an L1 identity term
keeps each output close to its input. The identity term defaults to the
per-pixel MEAN absolute difference so its weight stays scale-meaningful
across patch sizes; ``l1_sum=True`` switches to the raw sum. Each step does
one refiner update, then one discriminator update on a freshly refined batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, LossError, TrainingDivergenceError
from .nets import DiscriminatorNet, RefinerNet

ROLE_SYNTHETIC = "synthetic"
ROLE_REFINED = "refined"
ROLE_REAL = "real"
ROLE_REAL_SUBSAMPLE = "real_subsample"


@dataclass
class SampleSet:
    """A stack of same-shape image patches with a provenance role.

    ``images`` is (N, C, H, W) float32 in [0, 1].
    """

    role: str
    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ContractError(f"SampleSet images must be NCHW, got {self.images.shape}")
        if self.images.shape[0] < 1:
            raise ContractError("SampleSet needs at least one patch")

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_patches(cls, role, patches):
        stack = np.stack([p.pixels.transpose(2, 0, 1) for p in patches])
        return cls(role=role, images=stack)


@dataclass
class TrainConfig:
    lam: float = 40.0
    batch_size: int = 1
    max_steps: int = 1000
    optimizer: str = "adam"
    lr_refiner: float = 2e-4
    lr_disc: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    history_buffer_size: int = 0
    log_every: int = 1
    l1_sum: bool = False
    disc_updates: int = 1
    base_channels: int = 16
    res_blocks: int = 2
    disc_layers: int = 3

    def validate(self):
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")
        if self.log_every < 1:
            raise ContractError("log_every must be >= 1")
        if self.disc_updates < 1:
            raise ContractError("disc_updates must be >= 1")


@dataclass
class TrainResult:
    refiner: RefinerNet
    disc: DiscriminatorNet
    log: list = field(default_factory=list)
    final_step: int = 0


def _check_finite(*tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise LossError("loss input contains non-finite values")


def refiner_loss(d_fake, refined, original, lam: float, l1_sum: bool = False):
    """Adversarial-plus-identity refiner objective.

    Returns (total, adversarial, identity) scalar tensors. The adversarial
    part sums -log(1 - d_fake) over the batch; the identity part is the
    per-pixel mean |refined - original| per image, summed over the batch
    (or the raw sum with ``l1_sum``), weighted by ``lam``.
    """
    d_fake = ad.as_tensor(d_fake)
    refined = ad.as_tensor(refined)
    original = ad.as_tensor(original)
    _check_finite(d_fake, refined, original)
    if refined.data.shape != original.data.shape:
        raise ContractError("refined and original batches must be shape-aligned")
    adv = -((1.0 - d_fake).log().sum())
    diff = (refined - original).abs()
    if l1_sum:
        identity = diff.sum()
    elif diff.data.ndim == 4:
        identity = diff.mean(axis=(1, 2, 3)).sum()
    else:
        identity = diff.mean()
    total = adv + lam * identity
    return total, adv, identity


def discriminator_loss(d_fake, d_real):
    """-sum log d_fake - sum log (1 - d_real); d_* are fake-probabilities."""
    d_fake = ad.as_tensor(d_fake)
    d_real = ad.as_tensor(d_real)
    _check_finite(d_fake, d_real)
    return -(d_fake.log().sum()) - (1.0 - d_real).log().sum()


class _HistoryBuffer:
    """Pool of past refined images; half of each fake batch is replayed from
    here once the pool has content, with random replacement."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.items = []

    def mix(self, batch: np.ndarray) -> np.ndarray:
        n_replay = min(len(self.items), batch.shape[0] // 2)
        mixed = batch.copy()
        if n_replay > 0:
            replay_idx = self.rng.integers(0, len(self.items), size=n_replay)
            for slot, idx in enumerate(replay_idx):
                mixed[slot] = self.items[idx]
        for img in batch:
            if len(self.items) < self.capacity:
                self.items.append(img.copy())
            else:
                victim = int(self.rng.integers(0, self.capacity))
                self.items[victim] = img.copy()
        return mixed


def train(x_set: SampleSet, y_set: SampleSet, cfg: TrainConfig,
          refiner: RefinerNet | None = None, disc: DiscriminatorNet | None = None,
          on_log=None) -> TrainResult:
    """Alternating adversarial training of refiner and discriminator.

    Per step: draw minibatches from both sets with replacement, update the
    refiner on its loss, then update the discriminator on a freshly refined
    batch. Raises ``TrainingDivergenceError`` (with the step index) if any
    loss goes non-finite.
    """
    cfg.validate()
    if x_set.images.shape[1:] != y_set.images.shape[1:]:
        raise ContractError(
            f"sample sets disagree on patch shape: {x_set.images.shape[1:]} vs "
            f"{y_set.images.shape[1:]}"
        )
    channels = x_set.images.shape[1]
    rng = np.random.default_rng(cfg.seed)
    if refiner is None:
        refiner = RefinerNet(in_channels=channels, base_channels=cfg.base_channels,
                             res_blocks=cfg.res_blocks, seed=cfg.seed)
    if disc is None:
        disc = DiscriminatorNet(in_channels=channels, base_channels=cfg.base_channels,
                                conv_layers=cfg.disc_layers, seed=cfg.seed + 1)
    opt_r = ad.make_optimizer(cfg.optimizer, refiner.params(), cfg.lr_refiner,
                              cfg.beta1, cfg.beta2, cfg.eps)
    opt_d = ad.make_optimizer(cfg.optimizer, disc.params(), cfg.lr_disc,
                              cfg.beta1, cfg.beta2, cfg.eps)
    buffer = _HistoryBuffer(cfg.history_buffer_size, rng) if cfg.history_buffer_size > 0 else None

    n, m = len(x_set), len(y_set)
    log = []
    for step in range(1, cfg.max_steps + 1):
        x_idx = rng.integers(0, n, size=cfg.batch_size)
        y_idx = rng.integers(0, m, size=cfg.batch_size)
        x_batch = Tensor(x_set.images[x_idx])
        y_batch = Tensor(y_set.images[y_idx])

        # refiner update
        refined = refiner.forward(x_batch)
        d_fake = disc.forward(refined)
        loss_r, loss_adv, loss_id = refiner_loss(
            d_fake, refined, x_batch, cfg.lam, cfg.l1_sum
        )
        if not np.isfinite(loss_r.data):
            raise TrainingDivergenceError(
                f"refiner loss diverged at step {step}", step=step
            )
        ad.zero_grads(refiner.params() + disc.params())
        loss_r.backward()
        opt_r.step()

        # discriminator update(s) on freshly refined images
        for _ in range(cfg.disc_updates):
            fresh = refiner.forward(x_batch).detach()
            fake_images = buffer.mix(fresh.data) if buffer is not None else fresh.data
            d_fake_d = disc.forward(Tensor(fake_images))
            d_real_d = disc.forward(y_batch)
            loss_d = discriminator_loss(d_fake_d, d_real_d)
            if not np.isfinite(loss_d.data):
                raise TrainingDivergenceError(
                    f"discriminator loss diverged at step {step}", step=step
                )
            ad.zero_grads(disc.params())
            loss_d.backward()
            opt_d.step()

        if step % cfg.log_every == 0 or step == cfg.max_steps:
            record = {
                "step": step,
                "L_R": float(loss_r.data),
                "L_R_adv": float(loss_adv.data),
                "L_R_id": float(loss_id.data),
                "L_D": float(loss_d.data),
                "d_fake_mean": float(np.mean(d_fake_d.data)),
                "d_real_mean": float(np.mean(d_real_d.data)),
            }
            log.append(record)
            if on_log is not None:
                on_log(record)

    return TrainResult(refiner=refiner, disc=disc, log=log, final_step=cfg.max_steps)


def refine_dataset(refiner: RefinerNet, x_set: SampleSet, batch_size: int = 32) -> SampleSet:
    """Run every patch through the refiner, preserving order and count."""
    chunks = []
    for start in range(0, len(x_set), batch_size):
        batch = Tensor(x_set.images[start : start + batch_size])
        chunks.append(refiner.forward(batch).data)
    return SampleSet(role=ROLE_REFINED, images=np.concatenate(chunks, axis=0))


def subsample(y_set: SampleSet, k: int, seed: int) -> SampleSet:
    """Uniform draw of ``k`` distinct patches, deterministic per seed."""
    if k < 1 or k > len(y_set):
        raise ContractError(f"subsample size {k} out of range 1..{len(y_set)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(y_set), size=k, replace=False)
    return SampleSet(role=ROLE_REAL_SUBSAMPLE, images=y_set.images[idx])
