"""
AltAlign ablate command - Data-mixture ablation over Stage-1 parallel data and Stage 2.

Each row toggles which parallel data feeds Stage 1 (same-language copies,
machine translations, human translations) and whether Stage 2 follows. All
rows share one seed, so differences come from the data mixture alone. Rows
with the same Stage-1 mixture reuse one distillation run.
"""

import logging
from pathlib import Path
from typing import Dict, List

from pydantic import BaseModel, ConfigDict, model_validator

from .common import UsageError, append_run_manifest, dump_json, flags_dict, print_banner, resolve_corpus_file
from .data import (MixtureSpec, Provenance, load_classification_dataset, load_lexicon, load_parallel_pairs,
                   load_text_image_pairs)
from .encoders import load_checkpoint
from .evaluate import classification_reports, retrieval_reports
from .metrics import format_percent
from .train import TEACHERS, fresh_bundle, load_stage_config
from .training import run_stage

logger = logging.getLogger(__name__)

RESULT_KEYS = ('retrieval_src', 'retrieval_tgt', 'classify_src', 'classify_tgt')


class AblationToggles(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    en_en: bool
    en_xx_mt: bool
    en_xx_ht: bool
    cl: bool

    @model_validator(mode='after')
    def _needs_stage1_data(self):
        if not (self.en_en or self.en_xx_mt or self.en_xx_ht):
            raise ValueError("at least one Stage-1 data toggle must be enabled")
        return self

    def mixture(self) -> MixtureSpec:
        weights = {}
        if self.en_en:
            weights[Provenance.SAME] = 1.0
        if self.en_xx_mt:
            weights[Provenance.MT] = 1.0
        if self.en_xx_ht:
            weights[Provenance.HT] = 1.0
        return MixtureSpec.of(weights)


class AblationRow(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    toggles: AblationToggles
    results: Dict[str, float]

    @model_validator(mode='after')
    def _check_results(self):
        if set(self.results) != set(RESULT_KEYS):
            raise ValueError(f"results must have exactly the keys {RESULT_KEYS}")
        return self


# Ablation rows: name -> (label, toggles)
ABLATION_ROWS = {
    'full': ('EN-EN + MT + HT + CL', AblationToggles(en_en=True, en_xx_mt=True, en_xx_ht=True, cl=True)),
    'no-cl': ('EN-EN + MT + HT', AblationToggles(en_en=True, en_xx_mt=True, en_xx_ht=True, cl=False)),
    'en-mt': ('EN-EN + MT', AblationToggles(en_en=True, en_xx_mt=True, en_xx_ht=False, cl=False)),
    'en-only': ('EN-EN', AblationToggles(en_en=True, en_xx_mt=False, en_xx_ht=False, cl=False)),
    'mt-only': ('MT', AblationToggles(en_en=False, en_xx_mt=True, en_xx_ht=False, cl=False)),
}


def add_parser(subparsers):
    """Add ablate subcommand parser."""
    parser = subparsers.add_parser(
        'ablate',
        help='Run the data-mixture ablation table',
        description='Train and evaluate one model per toggle row with a shared seed'
    )
    parser.add_argument('--data', nargs='+', required=True, type=Path, help='Corpus directory written by gen-synth')
    parser.add_argument('--config', type=Path, help='Stage-1 config JSON (default: desk distill preset)')
    parser.add_argument('--contrast-config', type=Path, help='Stage-2 config JSON (default: desk contrast preset)')
    parser.add_argument('--teacher', choices=TEACHERS, default='oracle', help='Teacher for every row (default: oracle)')
    parser.add_argument('--rows', help=f"Comma-separated subset of rows: {', '.join(ABLATION_ROWS)} (default: all)")
    parser.add_argument('--seed', type=int, help='Seed shared by every row')
    parser.add_argument('--max-steps', type=int, help='Stage-1 step cap for every row')
    parser.add_argument('--target-lang', help='Target language (default: first non-source language in the data)')
    parser.add_argument('--out', required=True, type=Path, help='Output directory')
    parser.set_defaults(func=ablate_command)
    return parser


def selected_rows(text) -> List[str]:
    if not text:
        return list(ABLATION_ROWS)
    names = [name.strip() for name in text.split(',') if name.strip()]
    unknown = [name for name in names if name not in ABLATION_ROWS]
    if unknown or not names:
        raise UsageError(f"unknown ablation row(s) {', '.join(unknown) or text!r}; "
                         f"choose from {', '.join(ABLATION_ROWS)}")
    return list(dict.fromkeys(names))


def format_ablation_table(rows: List[AblationRow], src: str, tgt: str) -> str:
    """Toggle marks, then retrieval MR and classification accuracy per language."""
    head = (f"{'Row':<10}{'EN-EN':^7}{'MT':^5}{'HT':^5}{'CL':^5}"
            f"{f'Ret {src}':>10}{f'Ret {tgt}':>10}{f'Cls {src}':>10}{f'Cls {tgt}':>10}")
    lines = [head, '-' * len(head)]
    for row in rows:
        t = row.toggles
        marks = ''.join(f"{'✓' if on else '':^{w}}" for on, w in
                        ((t.en_en, 7), (t.en_xx_mt, 5), (t.en_xx_ht, 5), (t.cl, 5)))
        values = ''.join(f"{format_percent(row.results[k]):>10}" for k in RESULT_KEYS)
        lines.append(f"{row.name:<10}{marks}{values}")
    return '\n'.join(lines) + '\n'


def ablate_command(args):
    """Train and evaluate every selected row."""
    names = selected_rows(args.rows)
    distill_config = load_stage_config(args.config, 'distill', args.seed, args.max_steps)
    contrast_config = load_stage_config(args.contrast_config, 'contrast', args.seed)

    parallel_path = resolve_corpus_file(args.data, 'parallel')
    text_image_path = resolve_corpus_file(args.data, 'text_image')
    retrieval_path = resolve_corpus_file(args.data, 'retrieval')
    classification_path = resolve_corpus_file(args.data, 'classification')
    parallel = load_parallel_pairs(parallel_path)
    text_image = load_text_image_pairs(text_image_path)
    retrieval = load_text_image_pairs(retrieval_path)
    classification = load_classification_dataset(classification_path)

    src = load_lexicon(resolve_corpus_file(args.data, 'lexicon')).get('source_lang', 'en')
    tgt = args.target_lang or next((p.lang for p in retrieval if p.lang != src), None)
    if tgt is None:
        raise UsageError("the retrieval split has no target-language captions; pass --target-lang")

    out = Path(args.out)
    print_banner(f"Ablation: {len(names)} rows, source {src}, target {tgt}, seed {distill_config.seed}")

    stage1: Dict[str, Path] = {}
    rows: List[AblationRow] = []
    outputs: List[Path] = []
    for name in names:
        label, toggles = ABLATION_ROWS[name]
        mixture = toggles.mixture()
        key = str(mixture)
        print(f"\n[{name.upper()}] {label}")
        if key not in stage1:
            bundle = fresh_bundle(args.data, args.teacher, distill_config.seed)
            run_dir = out / 'stage1' / key.replace(':', '_').replace(',', '+')
            result = run_stage('distill', distill_config, bundle, run_dir, parallel_pairs=parallel, mixture=mixture)
            stage1[key] = result.checkpoint
            outputs.extend([result.checkpoint, result.loss_log])
            print(f"✓ Stage 1: {result.steps} steps, final loss {result.losses[-1]:.4g}" if result.losses
                  else "✓ Stage 1: 0 steps")
        else:
            print("✓ Stage 1: reusing the run with the same mixture")
        bundle = load_checkpoint(stage1[key])
        if toggles.cl:
            bundle.image_provider.register({p.image_id: p.image_embedding for p in text_image})
            result = run_stage('contrast', contrast_config, bundle, out / 'stage2' / name, text_image_pairs=text_image)
            outputs.extend([result.checkpoint, result.loss_log])
            print(f"✓ Stage 2: {result.steps} steps, final loss {result.losses[-1]:.4g}" if result.losses
                  else "✓ Stage 2: 0 steps")

        retrieval_by_lang = retrieval_reports(bundle, retrieval)
        classify_by_lang = classification_reports(bundle, classification)
        for lang in (src, tgt):
            if lang not in retrieval_by_lang or lang not in classify_by_lang:
                raise UsageError(f"language {lang!r} missing from the retrieval or classification data")
        rows.append(AblationRow(name=name, toggles=toggles, results={
            'retrieval_src': retrieval_by_lang[src].mean_recall,
            'retrieval_tgt': retrieval_by_lang[tgt].mean_recall,
            'classify_src': classify_by_lang[src].accuracy,
            'classify_tgt': classify_by_lang[tgt].accuracy,
        }))
        print(f"✓ MR {src} {format_percent(rows[-1].results['retrieval_src'])}, "
              f"MR {tgt} {format_percent(rows[-1].results['retrieval_tgt'])}")

    table = format_ablation_table(rows, src, tgt)
    json_path = out / 'ablation.json'
    text_path = out / 'ablation.txt'
    dump_json({'source_lang': src, 'target_lang': tgt, 'seed': distill_config.seed,
               'rows': [row.model_dump(mode='json') for row in rows]}, json_path)
    with open(text_path, 'w', encoding='utf-8') as f:
        f.write(table)

    print(f"\n{'='*60}\nAblation complete!\n{'='*60}")
    print(table, end='')
    print(f"✓ Results: {json_path}\n")
    append_run_manifest(out, 'ablate', flags_dict(args), distill_config.seed,
                        [parallel_path, text_image_path, retrieval_path, classification_path],
                        outputs + [json_path, text_path])
