"""
AltAlign distill and contrast commands - Run one training stage.

distill: Stage 1, teacher-to-student MSE over parallel pairs.
contrast: Stage 2, contrastive tuning against frozen image embeddings.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .common import (DataFormatError, UsageError, append_run_manifest, flags_dict, print_banner,
                     resolve_corpus_file)
from .data import (MixtureSpec, filter_by_aesthetic, load_lexicon, load_parallel_pairs,
                   load_text_image_pairs)
from .encoders import (EncoderBundle, ImageProvider, OracleTeacher, Vocab, build_bundle, load_checkpoint,
                       random_teacher)
from .runlog import RunSummary
from .training import StageConfig, run_stage

logger = logging.getLogger(__name__)

TEACHERS = ('oracle', 'random')


def _add_common_flags(parser, default_stage: str):
    parser.add_argument('--config', type=Path,
                        help=f'Stage config JSON (default: desk-scale {default_stage} preset)')
    parser.add_argument('--data', nargs='+', required=True, type=Path,
                        help='Corpus directory written by gen-synth, or individual dataset files')
    parser.add_argument('--out', required=True, type=Path, help='Output directory')
    parser.add_argument('--seed', type=int, help='Override the config seed (batching and initialization)')
    parser.add_argument('--max-steps', type=int, help='Override total_steps (0 = no cap)')
    parser.add_argument('--no-progress', action='store_true', help='Hide the progress bar')
    parser.add_argument('--log-every', type=int, default=50, help='Log every N steps (default: 50)')


def add_parser(subparsers):
    """Add distill and contrast subcommand parsers."""
    distill = subparsers.add_parser(
        'distill',
        help='Stage 1: distill the teacher text encoder into the student',
        description='Train the student and projection to reproduce the frozen teacher on parallel pairs'
    )
    _add_common_flags(distill, 'distill')
    distill.add_argument('--init-checkpoint', type=Path,
                         help='Start from this bundle instead of a freshly initialized student')
    distill.add_argument('--teacher', choices=TEACHERS, default='oracle',
                         help='Teacher for a fresh bundle: lexicon oracle or seeded random transformer (default: oracle)')
    distill.add_argument('--mixture', help='Provenance classes and weights, e.g. SAME,MT,HT or SAME:1,MT:0.5 '
                                           '(default: every class in the corpus)')
    distill.set_defaults(func=distill_command)

    contrast = subparsers.add_parser(
        'contrast',
        help='Stage 2: contrastive tuning against frozen image embeddings',
        description='Tune the student, projection and temperature on text-image pairs'
    )
    _add_common_flags(contrast, 'contrast')
    contrast.add_argument('--init-checkpoint', type=Path, help='Stage-1 checkpoint to start from (required)')
    contrast.add_argument('--aesthetic-threshold',
                          help='Keep pairs scoring strictly above this value; either one number or '
                               'per-language values such as zh=5.5,en=6')
    contrast.set_defaults(func=contrast_command)
    return distill, contrast


def load_stage_config(path: Optional[Path], stage: str, seed: Optional[int] = None,
                      max_steps: Optional[int] = None) -> StageConfig:
    """
    Load a stage config file (or the desk preset) and apply flag overrides.

    Args:
        path: Config JSON, or None for the desk-scale preset
        stage: 'distill' or 'contrast'
        seed: Replaces config.seed when given
        max_steps: Replaces config.total_steps when given

    Returns:
        StageConfig
    """
    if path is not None:
        config = StageConfig.from_file(path)
    else:
        config = StageConfig.desk_distill() if stage == 'distill' else StageConfig.desk_contrast()
    updates = {}
    if seed is not None:
        updates['seed'] = seed
    if max_steps is not None:
        if max_steps < 0:
            raise UsageError("--max-steps must be nonnegative")
        updates['total_steps'] = max_steps
    return config.model_copy(update=updates) if updates else config


def parse_threshold(text: Optional[str]) -> Union[None, float, Dict[str, float]]:
    """Parse --aesthetic-threshold: '5.5' or 'zh=5.5,en=6'."""
    if text is None:
        return None
    try:
        if '=' not in text:
            return float(text)
        thresholds = {}
        for part in text.split(','):
            lang, _, value = part.partition('=')
            thresholds[lang.strip()] = float(value)
        return thresholds
    except ValueError:
        raise UsageError(f"bad --aesthetic-threshold {text!r}") from None


def fresh_bundle(data: Sequence[Path], teacher_kind: str, seed: int) -> EncoderBundle:
    """
    Build an untrained bundle from a corpus.

    The image provider holds the embeddings of the text-image file; the
    teacher is the lexicon oracle or a seeded random transformer.
    """
    vocab = Vocab.from_file(resolve_corpus_file(data, 'vocab'))
    pairs = load_text_image_pairs(resolve_corpus_file(data, 'text_image'))
    if not pairs:
        raise DataFormatError("text-image file is empty; cannot size the joint space")
    provider = ImageProvider.from_pairs(pairs, len(pairs[0].image_embedding))
    if teacher_kind == 'oracle':
        teacher = OracleTeacher.from_lexicon(vocab, load_lexicon(resolve_corpus_file(data, 'lexicon')), provider)
    else:
        teacher = random_teacher(vocab, seed)
        if teacher.out_dim != provider.dim:
            raise UsageError(f"random teacher width {teacher.out_dim} does not match the "
                             f"{provider.dim}-dimensional image embeddings")
    return build_bundle(vocab, teacher, provider, seed=seed)


def fresh_bundle_inputs(data: Sequence[Path], teacher_kind: str) -> List[Path]:
    """Corpus files fresh_bundle reads, for the run manifest."""
    roles = ('vocab', 'text_image', 'lexicon') if teacher_kind == 'oracle' else ('vocab', 'text_image')
    return [resolve_corpus_file(data, role) for role in roles]


def distill_command(args):
    """Run Stage 1."""
    config = load_stage_config(args.config, 'distill', args.seed, args.max_steps)
    try:
        mixture = MixtureSpec.parse(args.mixture) if args.mixture else None
    except ValueError as e:
        raise UsageError(f"--mixture: {e}") from None

    inputs: List[Path] = []
    if args.init_checkpoint:
        bundle = load_checkpoint(args.init_checkpoint)
        inputs.append(args.init_checkpoint)
    else:
        bundle = fresh_bundle(args.data, args.teacher, config.seed)
        inputs.extend(fresh_bundle_inputs(args.data, args.teacher))
    parallel_path = resolve_corpus_file(args.data, 'parallel')
    inputs.append(parallel_path)
    pairs = load_parallel_pairs(parallel_path)

    print_banner(f"Stage 1: distillation ({len(pairs)} parallel pairs, mixture {mixture or 'all'})")
    summary = RunSummary('distill')
    result = run_stage('distill', config, bundle, args.out, parallel_pairs=pairs, mixture=mixture,
                       progress=not args.no_progress, log_every=args.log_every)
    _finish(args, 'distill', config, bundle, result, summary, inputs)


def contrast_command(args):
    """Run Stage 2."""
    if args.init_checkpoint is None:
        raise UsageError("contrast requires --init-checkpoint (a Stage-1 checkpoint)")
    config = load_stage_config(args.config, 'contrast', args.seed, args.max_steps)
    threshold = parse_threshold(args.aesthetic_threshold)

    bundle = load_checkpoint(args.init_checkpoint)
    pairs_path = resolve_corpus_file(args.data, 'text_image')
    pairs = load_text_image_pairs(pairs_path, bundle.joint_dim)
    if threshold is not None:
        pairs = filter_by_aesthetic(pairs, threshold)
    bundle.image_provider.register({p.image_id: p.image_embedding for p in pairs})

    print_banner(f"Stage 2: contrastive tuning ({len(pairs)} text-image pairs)")
    summary = RunSummary('contrast')
    result = run_stage('contrast', config, bundle, args.out, text_image_pairs=pairs,
                       progress=not args.no_progress, log_every=args.log_every)
    if bundle.logit_scale is not None:
        summary.record('temperature', 1.0 / math.exp(bundle.logit_scale.item()))
    _finish(args, 'contrast', config, bundle, result, summary, [args.init_checkpoint, pairs_path])


def _finish(args, stage, config, bundle, result, summary, inputs):
    summary.record('steps', result.steps)
    if result.losses:
        summary.record('first_loss', result.losses[0])
        summary.record('final_loss', result.losses[-1])
    summary.record('frozen_sha256', bundle.frozen_digest())
    summary.record('checkpoint', result.checkpoint.name)
    summary.record('loss_log', result.loss_log.name)
    summary.print_summary()
    summary_path = Path(args.out) / f"{stage}_summary.json"
    summary.export_json(summary_path)
    print(f"✓ Checkpoint: {result.checkpoint}")
    print(f"✓ Loss log:   {result.loss_log}")
    append_run_manifest(args.out, stage, flags_dict(args), config.seed, inputs,
                        [result.checkpoint, result.loss_log, summary_path])
