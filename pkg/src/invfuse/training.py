"""Bidirectional unsupervised training.

Each step runs the forward pass (fused image + latent), scores the fused
image against both sources and the latent batch against fresh prior
samples, then resamples a new latent and runs the inverse pass so the
reconstructions can be scored too.  One Adam update covers all parameters;
a reduce-on-plateau schedule watches the validation loss.

Randomness is replayable: the prior batch of step s draws with index 2s
and the resampled latent with 2s+1, so a run is a pure function of
(config, data).  Validation draws are keyed by image id (with a high bit
set so they can never collide with step indices), which makes the
validation loss a fixed function of the parameters -- exactly what a
plateau schedule needs.

When fusion_weight is 1.0 the decomposition term has zero weight, so the
inverse pass is skipped entirely; because draw indices are derived from
the step number (not a shared counter), skipping consumes no randomness
and the parameter trajectory is bitwise identical either way.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, finite_diff_check
from .errors import ConfigError, NumericError
from .flow import FlowModel, LatentSpec, sample_latent
from .losses import (LossWeights, SsimConfig, decomposition_loss, fusion_loss,
                     latent_loss, q_ssim, total_loss)

# validation draw indices live above bit 61; step-derived indices stay small
_VAL_DRAW_BIT = 1 << 61


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.95
    plateau_patience: int = 8
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    latent: LatentSpec = LatentSpec()

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(
                f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError(
                f"plateau_patience must be >= 1, got {self.plateau_patience}")


class AdamState:
    """First/second moments per parameter, step count, and the current lr."""

    def __init__(self, model: FlowModel, config: TrainConfig):
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.lr = config.lr
        self.step_count = 0
        self.m = {name: np.zeros_like(p) for name, p in model.parameters()}
        self.v = {name: np.zeros_like(p) for name, p in model.parameters()}


def adam_step(params, grads, state: AdamState):
    """Standard bias-corrected Adam; returns the updated parameter dict."""
    state.step_count += 1
    t = state.step_count
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape "
                              f"{p.shape} for {name!r}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        out[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return out


class PlateauScheduler:
    """lr <- lr * factor after `patience` consecutive epochs without a
    strictly better validation loss; any improvement resets the counter."""

    def __init__(self, factor: float, patience: int):
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def step(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return lr
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return lr * self.factor
        return lr


@dataclass
class LossBreakdown:
    total: float
    fusion: float
    fusion_ssim: float
    fusion_l2: float
    latent: float
    dec: float
    dec_ssim: float
    dec_l2: float

    def recombined(self, weights: LossWeights) -> float:
        a = weights.fusion_weight
        return a * (self.fusion + self.latent) + (1.0 - a) * self.dec


@dataclass
class ValStats:
    loss_total: float
    loss_fusion: float
    loss_latent: float
    loss_dec: float
    fusion_ssim_x1: float
    fusion_ssim_x2: float
    dec_ssim_x1: float
    dec_ssim_x2: float


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train: LossBreakdown
    val: ValStats


@dataclass
class TrainResult:
    model: FlowModel
    epochs: list = field(default_factory=list)   # EpochStats per epoch
    steps: list = field(default_factory=list)    # LossBreakdown per step
    final_lr: float = 0.0


EPOCH_LOG_COLUMNS = (
    "epoch", "lr", "train_total", "train_fusion_ssim", "train_fusion_l2",
    "train_latent", "train_dec_ssim", "train_dec_l2", "val_total",
    "val_fusion_ssim_x1", "val_fusion_ssim_x2",
    "val_dec_ssim_x1", "val_dec_ssim_x2")


def epoch_log_header() -> str:
    return "\t".join(EPOCH_LOG_COLUMNS)


def epoch_log_row(stats: EpochStats) -> str:
    t, v = stats.train, stats.val
    vals = (stats.epoch, stats.lr, t.total, t.fusion_ssim, t.fusion_l2,
            t.latent, t.dec_ssim, t.dec_l2, v.loss_total,
            v.fusion_ssim_x1, v.fusion_ssim_x2, v.dec_ssim_x1, v.dec_ssim_x2)
    return "\t".join(str(x) if isinstance(x, int) else f"{x:.10g}" for x in vals)


def _stable_draw_index(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return _VAL_DRAW_BIT | int.from_bytes(digest[:7], "big")


def validation_latents(latent_spec, pair_ids, image_shape) -> np.ndarray:
    """The decomposition latents used when evaluating: one per image,
    drawn from a label keyed by the image id, so an evaluation pass is a
    fixed function of the parameters (no draw-order dependence)."""
    return np.concatenate([
        sample_latent(latent_spec, (1,) + tuple(image_shape),
                      _stable_draw_index(f"validation-z:{pid}"))
        for pid in pair_ids])


def _stack_pairs(pairs):
    x1 = np.stack([p.x1 for p in pairs])[:, None]
    x2 = np.stack([p.x2 for p in pairs])[:, None]
    return x1, x2


class Trainer:
    def __init__(self, model: FlowModel, config: TrainConfig,
                 ssim_config: SsimConfig = SsimConfig()):
        if not config.latent.is_constant and config.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for a sampled latent "
                              "prior (the batch MMD needs pairs)")
        self.model = model
        self.config = config
        self.ssim_config = ssim_config
        self.opt = AdamState(model, config)
        self.scheduler = PlateauScheduler(config.plateau_factor,
                                          config.plateau_patience)
        self.step_index = 0

    # -- one optimization step -------------------------------------------
    def step(self, x1: np.ndarray, x2: np.ndarray,
             force_inverse: bool = False) -> LossBreakdown:
        """One Adam update from one (B,1,H,W) batch; returns the logged
        loss breakdown.  `force_inverse` runs the inverse pass even when
        its weight is zero (the updates are identical; used by tests)."""
        cfg = self.config
        weights = cfg.loss_weights
        tape = Tape()
        bound = self.model.bind(tape)
        x1t, x2t = Tensor(x1), Tensor(x2)

        y, z = bound.forward(x1t, x2t)
        fusion = fusion_loss(x1t, x2t, y, weights, self.ssim_config)
        latent = self._latent_term(z, draw_index=2 * self.step_index)

        if weights.fusion_weight == 1.0 and not force_inverse:
            dec_total = Tensor(np.float64(0.0))
            dec_ssim = dec_l2 = 0.0
        else:
            z_new = sample_latent(cfg.latent, z.shape, 2 * self.step_index + 1)
            rec1, rec2 = bound.inverse(y, Tensor(z_new))
            dec = decomposition_loss(x1t, x2t, rec1, rec2, weights,
                                     self.ssim_config)
            dec_total, dec_ssim, dec_l2 = dec.total, dec.ssim.item(), dec.l2.item()

        total = total_loss(fusion.total, latent, dec_total, weights)
        breakdown = LossBreakdown(
            total=total.item(), fusion=fusion.total.item(),
            fusion_ssim=fusion.ssim.item(), fusion_l2=fusion.l2.item(),
            latent=latent.item(), dec=dec_total.item(),
            dec_ssim=dec_ssim, dec_l2=dec_l2)
        if not math.isfinite(breakdown.total):
            raise NumericError(f"step {self.step_index}: non-finite loss; "
                               f"breakdown: {breakdown}")

        tape.backward(total)
        named = self.model.parameters()
        grads = {name: leaf.grad for (name, _), leaf in zip(named, bound.leaves)}
        updated = adam_step(dict(named), grads, self.opt)
        self.model.set_parameters(updated.items())
        self.step_index += 1
        return breakdown

    def _latent_term(self, z, draw_index):
        cfg = self.config
        batch = z.shape[0]
        flat = ad.reshape(z, (batch, int(np.prod(z.shape[1:]))))
        if cfg.latent.is_constant:
            return latent_loss(flat, cfg.latent)
        prior = sample_latent(cfg.latent, flat.shape, draw_index)
        return latent_loss(flat, cfg.latent, prior_batch=prior)

    # -- full loop ---------------------------------------------------------
    def run(self, train_pairs, val_pairs, log=None, on_epoch=None) -> TrainResult:
        cfg = self.config
        if not train_pairs:
            raise ConfigError("training set is empty")
        result = TrainResult(model=self.model, final_lr=self.opt.lr)
        if log is not None:
            log(epoch_log_header())
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 4, epoch))).permutation(len(train_pairs))
            batches = _batch_indices(order, cfg.batch_size)
            epoch_breakdowns = []
            for idx in batches:
                x1, x2 = _stack_pairs([train_pairs[i] for i in idx])
                try:
                    breakdown = self.step(x1, x2)
                except NumericError as err:
                    raise NumericError(f"epoch {epoch}: {err}") from err
                epoch_breakdowns.append(breakdown)
                result.steps.append(breakdown)
            val = validate(self.model, val_pairs, cfg, self.ssim_config)
            stats = EpochStats(epoch=epoch, lr=self.opt.lr,
                               train=_mean_breakdown(epoch_breakdowns), val=val)
            result.epochs.append(stats)
            if log is not None:
                log(epoch_log_row(stats))
            if on_epoch is not None:
                on_epoch(stats)
            self.opt.lr = self.scheduler.step(val.loss_total, self.opt.lr)
        result.final_lr = self.opt.lr
        return result


def _batch_indices(order, batch_size):
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a singleton tail cannot feed the batch MMD; fold it into its neighbor
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _mean_breakdown(breakdowns) -> LossBreakdown:
    n = float(len(breakdowns))
    sums = {name: sum(getattr(b, name) for b in breakdowns) / n
            for name in ("total", "fusion", "fusion_ssim", "fusion_l2",
                         "latent", "dec", "dec_ssim", "dec_l2")}
    return LossBreakdown(**sums)


def validate(model: FlowModel, val_pairs, config: TrainConfig,
             ssim_config: SsimConfig = SsimConfig()) -> ValStats:
    """Parameter-free evaluation pass mirroring the training objective.

    Reconstructions use freshly sampled latents (decomposition at use time
    has only the fused image), drawn deterministically per image id so the
    whole pass is a fixed function of the parameters.
    """
    if not val_pairs:
        raise ConfigError("validation set is empty")
    weights = config.loss_weights
    bound = model.bind(None)
    x1, x2 = _stack_pairs(val_pairs)
    x1t, x2t = Tensor(x1), Tensor(x2)
    y, z = bound.forward(x1t, x2t)

    fusion = fusion_loss(x1t, x2t, y, weights, ssim_config)
    flat = ad.reshape(z, (z.shape[0], int(np.prod(z.shape[1:]))))
    if config.latent.is_constant:
        latent = latent_loss(flat, config.latent)
    else:
        prior = sample_latent(config.latent, flat.shape,
                              _stable_draw_index("validation-prior"))
        latent = latent_loss(flat, config.latent, prior_batch=prior)

    z_new = validation_latents(config.latent, [p.id for p in val_pairs],
                               z.shape[1:])
    rec1, rec2 = bound.inverse(y, Tensor(z_new))
    dec = decomposition_loss(x1t, x2t, rec1, rec2, weights, ssim_config)
    total = total_loss(fusion.total, latent, dec.total, weights)

    return ValStats(
        loss_total=total.item(), loss_fusion=fusion.total.item(),
        loss_latent=latent.item(), loss_dec=dec.total.item(),
        fusion_ssim_x1=q_ssim(x1t, y, ssim_config).item(),
        fusion_ssim_x2=q_ssim(x2t, y, ssim_config).item(),
        dec_ssim_x1=q_ssim(x1t, rec1, ssim_config).item(),
        dec_ssim_x2=q_ssim(x2t, rec2, ssim_config).item())


def train(model: FlowModel, train_pairs, val_pairs, config: TrainConfig,
          ssim_config: SsimConfig = SsimConfig(), log=None,
          on_epoch=None) -> TrainResult:
    return Trainer(model, config, ssim_config).run(
        train_pairs, val_pairs, log=log, on_epoch=on_epoch)


# ---------------------------------------------------------------------------
# finite-difference verification of the whole pipeline
# ---------------------------------------------------------------------------

def gradient_check_model(model: FlowModel, x1: np.ndarray, x2: np.ndarray,
                         config: TrainConfig, tol: float = 1e-4,
                         h: float = 1e-5):
    """Check d L_total / d theta for every model parameter against central
    differences.  Latents and priors are drawn once and held fixed so the
    loss is a deterministic function of the parameters."""
    weights = config.loss_weights
    ssim_config = SsimConfig()
    names = [name for name, _ in model.parameters()]
    arrays = [arr for _, arr in model.parameters()]
    bound_template = model.bind(None)

    batch = x1.shape[0]
    z_shape = (batch, 1, x1.shape[2], x1.shape[3])
    d = int(np.prod(z_shape[1:]))
    prior = sample_latent(config.latent, (batch, d), 0)
    z_new = sample_latent(config.latent, z_shape, 1)

    def f(leaves):
        it = iter(leaves)
        for block in bound_template.blocks:
            for side in ("a", "b"):
                for key in ("w1", "b1", "w2", "b2"):
                    block[side][key] = next(it)
        x1t, x2t = Tensor(x1), Tensor(x2)
        y, z = bound_template.forward(x1t, x2t)
        fusion = fusion_loss(x1t, x2t, y, weights, ssim_config)
        flat = ad.reshape(z, (batch, d))
        if config.latent.is_constant:
            latent = latent_loss(flat, config.latent)
        else:
            latent = latent_loss(flat, config.latent, prior_batch=prior)
        if weights.fusion_weight == 1.0:
            dec_total = Tensor(np.float64(0.0))
        else:
            rec1, rec2 = bound_template.inverse(y, Tensor(z_new))
            dec_total = decomposition_loss(x1t, x2t, rec1, rec2, weights,
                                           ssim_config).total
        return total_loss(fusion.total, latent, dec_total, weights)

    return finite_diff_check(f, arrays, h=h, tol=tol, names=names)
