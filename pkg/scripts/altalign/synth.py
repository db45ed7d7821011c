"""
AltAlign gen-synth command - Write a deterministic synthetic corpus.
"""

import logging
from pathlib import Path

from pydantic import ValidationError

from .common import UsageError, append_run_manifest, flags_dict, print_banner
from .data import SynthConfig, gen_synthetic_corpus

logger = logging.getLogger(__name__)


def add_parser(subparsers):
    """Add gen-synth subcommand parser."""
    parser = subparsers.add_parser(
        'gen-synth',
        help='Generate a synthetic multilingual corpus',
        description='Write parallel pairs, text-image pairs, a held-out retrieval split, '
                    'a classification dataset, a vocabulary and a lexicon'
    )
    parser.add_argument('--seed', type=int, default=7, help='Random seed (default: 7)')
    parser.add_argument('--concepts', type=int, default=10, help='Number of concepts / images (default: 10)')
    parser.add_argument('--langs', default='en,zh',
                        help='Comma-separated languages; the first is the teacher-side source (default: en,zh)')
    parser.add_argument('--dim', type=int, default=32, help='Joint embedding dimension (default: 32)')
    parser.add_argument('--pairs-per-class', type=int, default=600,
                        help='Parallel pairs per provenance class (default: 600)')
    parser.add_argument('--captions-per-concept', type=int, default=20,
                        help='Training captions per concept and language (default: 20)')
    parser.add_argument('--out-dir', required=True, type=Path, help='Directory to write the corpus into')
    parser.set_defaults(func=gen_synth_command)
    return parser


def gen_synth_command(args):
    """Generate the corpus described by the flags."""
    try:
        config = SynthConfig(
            seed=args.seed,
            concepts=args.concepts,
            langs=tuple(lang.strip() for lang in args.langs.split(',') if lang.strip()),
            dim=args.dim,
            pairs_per_class=args.pairs_per_class,
            captions_per_concept=args.captions_per_concept,
        )
    except ValidationError as e:
        problems = '; '.join(f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors())
        raise UsageError(f"invalid corpus settings: {problems}") from None

    print_banner(f"Synthetic corpus: {config.concepts} concepts, languages {', '.join(config.langs)}")
    paths = gen_synthetic_corpus(config, args.out_dir)
    for role, path in paths.items():
        print(f"✓ {role:<15} {path}")

    append_run_manifest(args.out_dir, 'gen-synth', flags_dict(args), config.seed,
                        inputs=[], outputs=list(paths.values()))
    print(f"{'='*60}\n")
