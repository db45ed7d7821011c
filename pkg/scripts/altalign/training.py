"""
Both optimization stages.

Stage 1 (distill) regresses the projected student CLS output onto the frozen
teacher's TOS output with MSE over parallel pairs drawn from a provenance
mixture. Stage 2 (contrast) tunes the student against frozen image embeddings
with a symmetric InfoNCE loss and a learnable temperature.

Both stages use AdamW with linear warmup and global-norm gradient clipping.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tqdm import tqdm

from . import tensor as T
from .common import ConfigError, DataFormatError, FrozenParameterError, NumericalError, PathLike
from .data import (MixtureSpec, ParallelPair, Provenance, TextImagePair, epoch_batches,
                   group_by_provenance, sample_batch)
from .encoders import EncoderBundle, save_checkpoint
from .runlog import LossLogWriter
from .tensor import Tensor

logger = logging.getLogger(__name__)

Stage = Literal['distill', 'contrast']

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_CEILING = 100.0


class StageConfig(BaseModel):
    """
    Hyperparameters of one training stage.

    total_steps caps the run when positive; 0 runs every step of every epoch.
    """

    model_config = ConfigDict(extra='forbid', frozen=True)

    batch_size: int = Field(ge=1)
    lr: float = Field(gt=0)
    betas: Tuple[float, float]
    eps: float = Field(gt=0)
    weight_decay: float = Field(ge=0)
    warmup_steps: int = Field(ge=0)
    epochs: int = Field(ge=0)
    grad_clip: float = Field(gt=0)
    total_steps: int = Field(0, ge=0)
    seed: int = 0
    schedule: Literal['constant', 'cosine'] = 'constant'

    @field_validator('betas')
    @classmethod
    def _check_betas(cls, betas):
        if not all(0 < b < 1 for b in betas):
            raise ValueError(f"betas must lie strictly between 0 and 1, got {betas}")
        return betas

    @classmethod
    def from_file(cls, path: PathLike) -> 'StageConfig':
        """
        Load a stage config from JSON.

        Raises:
            ConfigError: unreadable JSON, unknown keys or out-of-range values
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError("config file does not exist", path)
        try:
            with open(path, encoding='utf-8') as f:
                return cls.model_validate(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON ({e.msg})", path) from None
        except ValidationError as e:
            problems = '; '.join(f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ConfigError(problems, path) from None

    # Published hyper-parameters (batch 1024) and desk-scale counterparts.

    @classmethod
    def published_distill(cls) -> 'StageConfig':
        return cls(batch_size=1024, lr=1e-4, betas=(0.99, 0.999), eps=1e-8, weight_decay=1e-1,
                   warmup_steps=500, epochs=10, grad_clip=1.0, total_steps=238620)

    @classmethod
    def published_contrast(cls) -> 'StageConfig':
        return cls(batch_size=1024, lr=2e-6, betas=(0.99, 0.999), eps=1e-8, weight_decay=5e-2,
                   warmup_steps=2000, epochs=1, grad_clip=5.0, total_steps=2000)

    @classmethod
    def desk_distill(cls) -> 'StageConfig':
        return cls(batch_size=32, lr=2e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                   warmup_steps=50, epochs=10, grad_clip=1.0, total_steps=500)

    @classmethod
    def desk_contrast(cls) -> 'StageConfig':
        return cls(batch_size=8, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-2,
                   warmup_steps=20, epochs=10, grad_clip=5.0, total_steps=200)


def lr_at(step: int, config: StageConfig) -> float:
    """
    Learning rate for 1-based `step`: linear warmup, then constant (or cosine decay).
    """
    if step < 1:
        raise ValueError(f"step must be at least 1, got {step}")
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if config.schedule == 'cosine' and config.total_steps > config.warmup_steps:
        progress = min(1.0, (step - config.warmup_steps) / (config.total_steps - config.warmup_steps))
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.lr


def clip_global_norm(params: Iterable[Tensor], bound: float, step: Optional[int] = None) -> float:
    """
    Rescale gradients so their joint L2 norm is at most `bound`.

    Args:
        params: Tensors whose `grad` is clipped (tensors without a grad are skipped)
        bound: Maximum global norm, positive
        step: Step number reported on failure

    Returns:
        The factor applied, in (0, 1]

    Raises:
        NumericalError: a gradient is non-finite
    """
    if bound <= 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    params = [p for p in params if p.grad is not None]
    total = math.fsum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        bad = next((p.name for p in params if not np.all(np.isfinite(p.grad))), None)
        raise NumericalError(f"non-finite gradient{f' in {bad}' if bad else ''}", step)
    if norm <= bound:
        return 1.0
    factor = bound / norm
    for p in params:
        p.grad = (p.grad * factor).astype(p.grad.dtype)
    return factor


def decays(name: str) -> bool:
    """Weight decay skips the temperature and normalization gains/biases."""
    return not (name == 'logit_scale' or name.endswith('.gamma') or name.endswith('.beta'))


@dataclass
class OptimizerState:
    """AdamW moment buffers keyed by parameter name, plus the update counter."""

    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Dict[str, Tensor], state: OptimizerState, config: StageConfig, step_lr: float):
    """
    One AdamW update with bias correction and decoupled weight decay.

    A missing gradient counts as zero. Parameter arrays are replaced, never
    written in place.

    Raises:
        NumericalError: an update produced non-finite values
    """
    state.step += 1
    beta1, beta2 = config.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    updates = {}
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise T.ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        value = p.data
        if config.weight_decay and decays(name):
            value = value - step_lr * config.weight_decay * value
        value = value - step_lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite update for {name}", state.step)
        state.exp_avg[name] = m.astype(p.dtype)
        state.exp_avg_sq[name] = v.astype(p.dtype)
        updates[name] = value.astype(p.dtype)
    for name, value in updates.items():
        params[name].data = value


class ContrastiveHead:
    """Learnable temperature stored as a logarithm; exp(logit_scale) never exceeds the ceiling."""

    def __init__(self, logit_scale: Optional[Tensor] = None, ceiling: float = LOGIT_SCALE_CEILING):
        if logit_scale is None:
            logit_scale = Tensor(LOGIT_SCALE_INIT, requires_grad=True, name='logit_scale')
        logit_scale.requires_grad = True
        logit_scale.name = 'logit_scale'
        self.logit_scale = logit_scale
        self.ceiling = ceiling
        self.clamp()

    @property
    def scale(self) -> float:
        return math.exp(self.logit_scale.item())

    def clamp(self):
        limit = math.log(self.ceiling)
        if self.logit_scale.item() > limit:
            self.logit_scale.data = np.full(self.logit_scale.shape, limit, dtype=self.logit_scale.dtype)

    def parameters(self) -> Dict[str, Tensor]:
        return {'logit_scale': self.logit_scale}


def contrastive_loss(text_emb: Tensor, img_emb: Tensor, head: ContrastiveHead) -> Tensor:
    """
    Symmetric InfoNCE over a batch of matched rows.

    Both sides are L2-normalized; logits = exp(logit_scale) * text @ image^T;
    loss = (CE(logits, diag) + CE(logits^T, diag)) / 2.
    """
    if text_emb.ndim != 2 or text_emb.shape != img_emb.shape:
        raise T.ShapeError(f"contrastive_loss needs equal [n, d] inputs, got {text_emb.shape} and {img_emb.shape}")
    targets = np.arange(text_emb.shape[0])
    similarities = T.l2_normalize(text_emb) @ T.transpose(T.l2_normalize(img_emb))
    logits = similarities * T.exp(head.logit_scale)
    both = T.softmax_cross_entropy(logits, targets) + T.softmax_cross_entropy(T.transpose(logits), targets)
    return T.scale(both, 0.5)


@dataclass
class StepResult:
    loss: float
    lr: float
    clip_factor: float


def _check_loss(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}", step)
    return value


def _optimize(loss: Tensor, params: Dict[str, Tensor], state: OptimizerState,
              config: StageConfig, step: int) -> StepResult:
    value = _check_loss(loss, step)
    for p in params.values():
        p.zero_grad()
    T.backward(loss)
    factor = clip_global_norm(params.values(), config.grad_clip, step)
    step_lr = lr_at(step, config)
    adamw_step(params, state, config, step_lr)
    return StepResult(value, step_lr, factor)


def distill_step(batch: Sequence[ParallelPair], bundle: EncoderBundle, state: OptimizerState,
                 config: StageConfig, step: int) -> StepResult:
    """
    One Stage-1 step: MSE between the teacher on src_text and the student on tgt_text.

    Only the student and projection are updated. The reported loss is the
    value before the update.
    """
    if not batch:
        raise ValueError("distill_step needs a nonempty batch")
    target = bundle.encode_teacher(bundle.teacher_ids([p.src_text for p in batch]))
    output = bundle.encode_student(bundle.student_ids([p.tgt_text for p in batch]))
    return _optimize(T.mse(output, target), bundle.trainable_parameters(), state, config, step)


def contrastive_step(batch: Sequence[TextImagePair], bundle: EncoderBundle, head: ContrastiveHead,
                     state: OptimizerState, config: StageConfig, step: int) -> StepResult:
    """
    One Stage-2 step: symmetric InfoNCE between student captions and frozen image embeddings.

    The student, projection and temperature are updated; the image provider
    is only read.
    """
    if not batch:
        raise ValueError("contrastive_step needs a nonempty batch")
    text = bundle.encode_student(bundle.student_ids([p.caption for p in batch]))
    images = bundle.image_embed([p.image_id for p in batch])
    params = dict(bundle.trainable_parameters())
    params.update(head.parameters())
    result = _optimize(contrastive_loss(text, images, head), params, state, config, step)
    head.clamp()
    return result


@dataclass
class StageResult:
    checkpoint: Path
    loss_log: Path
    losses: List[float]
    steps: int


def _default_mixture(pools: Dict[Provenance, List[ParallelPair]]) -> MixtureSpec:
    return MixtureSpec.of({p: 1.0 for p, pairs in pools.items() if pairs})


def run_stage(stage: Stage, config: StageConfig, bundle: EncoderBundle, out_dir: PathLike,
              parallel_pairs: Optional[Sequence[ParallelPair]] = None,
              mixture: Optional[MixtureSpec] = None,
              text_image_pairs: Optional[Sequence[TextImagePair]] = None,
              progress: bool = False, log_every: int = 50) -> StageResult:
    """
    Train one stage and write `<stage>.ckpt` plus `<stage>_loss.jsonl` to out_dir.

    Stage 1 draws `len(enabled pairs) // batch_size` mixture batches per
    epoch. Stage 2 iterates seeded per-epoch batches of distinct images. A
    positive `config.total_steps` caps either stage. With zero epochs the
    input bundle is written unchanged.

    Args:
        stage: 'distill' or 'contrast'
        config: Stage hyperparameters (its seed drives batching)
        bundle: Encoders, modified in place
        out_dir: Output directory
        parallel_pairs: Stage-1 data
        mixture: Stage-1 provenance weights; defaults to every class present, equally
        text_image_pairs: Stage-2 data
        progress: Show a progress bar
        log_every: Emit an INFO record every this many steps

    Returns:
        StageResult

    Raises:
        NumericalError: non-finite loss, gradient or update
        FrozenParameterError: the teacher or image provider changed
        DataFormatError: not enough data for one batch, or unknown image ids
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    digest_before = bundle.frozen_digest()
    losses: List[float] = []
    checkpoint_path = out_dir / f"{stage}.ckpt"
    log_path = out_dir / f"{stage}_loss.jsonl"

    if stage == 'distill':
        if not parallel_pairs:
            raise DataFormatError("distill stage needs parallel pairs")
        pools = group_by_provenance(parallel_pairs)
        mixture = mixture or _default_mixture(pools)
        missing = [p.value for p in mixture.enabled if not pools[p]]
        if missing:
            raise DataFormatError(f"mixture enables {', '.join(missing)} but the corpus has no such pairs")
        enabled_count = sum(len(pools[p]) for p in mixture.enabled)
        steps_per_epoch = enabled_count // config.batch_size
        if config.epochs and steps_per_epoch == 0:
            raise DataFormatError(f"{enabled_count} enabled pairs cannot fill one batch of {config.batch_size}")
        total = config.epochs * steps_per_epoch
        if config.total_steps:
            total = min(total, config.total_steps)
        batches = (sample_batch(pools, mixture, config.batch_size, rng) for _ in range(total))
        logger.info("distill: mixture %s, %d steps (%d per epoch)", mixture, total, steps_per_epoch)
    elif stage == 'contrast':
        if not text_image_pairs:
            raise DataFormatError("contrast stage needs text-image pairs")
        unknown = sorted({p.image_id for p in text_image_pairs} - set(bundle.image_provider.ids))
        if unknown:
            raise DataFormatError(f"image ids not in the image provider: {', '.join(unknown[:5])}")
        head = ContrastiveHead(bundle.logit_scale)
        batches, total = _contrast_batches(text_image_pairs, config, rng)
        logger.info("contrast: %d pairs, %d steps", len(text_image_pairs), total)
    else:
        raise ValueError(f"unknown stage {stage!r}")

    counts = {p.value: 0 for p in Provenance}
    with LossLogWriter(log_path) as writer, tqdm(total=total, desc=stage, disable=not progress) as bar:
        for step, batch in enumerate(batches, start=1):
            if stage == 'distill':
                result = distill_step(batch, bundle, state, config, step)
            else:
                result = contrastive_step(batch, bundle, head, state, config, step)
            losses.append(result.loss)
            record = {'stage': stage, 'step': step, 'lr': result.lr, 'loss': result.loss,
                      'clip_factor': result.clip_factor}
            if stage == 'distill':
                for pair in batch:
                    counts[pair.provenance.value] += 1
                record['provenance_counts'] = dict(counts)
            writer.write(record)
            bar.update(1)
            bar.set_postfix(loss=f"{result.loss:.4g}", lr=f"{result.lr:.2e}", clip=f"{result.clip_factor:.3f}")
            if log_every and step % log_every == 0:
                logger.info("%s step %d/%d loss %.6g lr %.3g clip %.3f",
                            stage, step, total, result.loss, result.lr, result.clip_factor)

    if stage == 'contrast' and losses:
        bundle.logit_scale = head.logit_scale

    if bundle.frozen_digest() != digest_before:
        raise FrozenParameterError(f"frozen parameters changed during the {stage} stage")
    save_checkpoint(bundle, checkpoint_path)
    if losses:
        logger.info("%s finished: %d steps, first loss %.6g, final loss %.6g",
                    stage, len(losses), losses[0], losses[-1])
    return StageResult(checkpoint_path, log_path, losses, len(losses))


def _contrast_batches(pairs: Sequence[TextImagePair], config: StageConfig, rng: np.random.Generator):
    """Plan every Stage-2 batch up front so the step total is known."""
    planned: List[List[TextImagePair]] = []
    for _ in range(config.epochs):
        epoch = epoch_batches(pairs, config.batch_size, rng)
        if not epoch:
            images = len({p.image_id for p in pairs})
            raise DataFormatError(f"{len(pairs)} pairs over {images} images cannot fill one batch "
                                  f"of {config.batch_size} distinct images")
        planned.extend(epoch)
        if config.total_steps and len(planned) >= config.total_steps:
            break
    if config.total_steps:
        planned = planned[:config.total_steps]
    return planned, len(planned)
