"""
AltAlign eval command - Zero-shot classification and retrieval reports for a checkpoint.
"""

import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .common import (UsageError, append_run_manifest, dump_json, eval_threads, flags_dict, print_banner,
                     resolve_corpus_file)
from .data import ClassificationDataset, TextImagePair, load_classification_dataset, load_text_image_pairs
from .encoders import EncoderBundle, load_checkpoint
from .metrics import (ClassificationReport, MultilingualRetrievalReport, RetrievalReport, evaluate_classification,
                      format_classification_table, format_multilingual_table, format_retrieval_table,
                      multilingual_retrieval_eval, relevance_from_ids, retrieval_eval)

logger = logging.getLogger(__name__)

TASKS = ('classify', 'retrieval', 'multilingual')


class ClassifyOutput(BaseModel):
    model_config = ConfigDict(extra='forbid')

    task: Literal['classify'] = 'classify'
    reports: Dict[str, ClassificationReport]


class RetrievalOutput(BaseModel):
    model_config = ConfigDict(extra='forbid')

    task: Literal['retrieval'] = 'retrieval'
    reports: Dict[str, RetrievalReport]


class MultilingualOutput(BaseModel):
    model_config = ConfigDict(extra='forbid')

    task: Literal['multilingual'] = 'multilingual'
    summary: MultilingualRetrievalReport
    reports: Dict[str, RetrievalReport]


OUTPUT_MODELS = {'classify': ClassifyOutput, 'retrieval': RetrievalOutput, 'multilingual': MultilingualOutput}


def add_parser(subparsers):
    """Add eval subcommand parser."""
    parser = subparsers.add_parser(
        'eval',
        help='Evaluate a checkpoint',
        description='Zero-shot classification, bidirectional retrieval, or per-language retrieval'
    )
    parser.add_argument('--checkpoint', '--init-checkpoint', dest='checkpoint', required=True, type=Path,
                        help='Checkpoint to evaluate')
    parser.add_argument('--data', nargs='+', required=True, type=Path,
                        help='Corpus directory, or the classification / retrieval file')
    parser.add_argument('--task', choices=TASKS, default='retrieval', help='Evaluation to run (default: retrieval)')
    parser.add_argument('--lang', help='Evaluate this language only (default: every language in the data)')
    parser.add_argument('--format', choices=('json', 'table'), default='table',
                        help='What to print on stdout (default: table); both files are always written')
    parser.add_argument('--out', required=True, type=Path, help='Output directory')
    parser.set_defaults(func=eval_command)
    return parser


def group_by_lang(pairs: Sequence[TextImagePair], lang: Optional[str] = None) -> Dict[str, List[TextImagePair]]:
    groups: Dict[str, List[TextImagePair]] = OrderedDict()
    for pair in pairs:
        if lang is None or pair.lang == lang:
            groups.setdefault(pair.lang, []).append(pair)
    if lang is not None and not groups:
        raise UsageError(f"no retrieval captions for language {lang!r}")
    return groups


def retrieval_reports(bundle: EncoderBundle, pairs: Sequence[TextImagePair],
                      lang: Optional[str] = None) -> Dict[str, RetrievalReport]:
    """Retrieval per language, each over the images its own captions describe."""
    reports = OrderedDict()
    for code, group in group_by_lang(pairs, lang).items():
        image_ids, embeddings = [], {}
        for pair in group:
            if pair.image_id not in embeddings:
                image_ids.append(pair.image_id)
                embeddings[pair.image_id] = pair.image_embedding
        text_embs = bundle.embed_texts([p.caption for p in group])
        img_embs = np.array([embeddings[i] for i in image_ids])
        reports[code] = retrieval_eval(text_embs, img_embs,
                                       relevance_from_ids([p.image_id for p in group], image_ids))
    return reports


def classification_reports(bundle: EncoderBundle, dataset: ClassificationDataset,
                           lang: Optional[str] = None) -> Dict[str, ClassificationReport]:
    langs = [lang] if lang else dataset.languages
    return OrderedDict((code, evaluate_classification(dataset, code, bundle.embed_texts)) for code in langs)


def multilingual_reports(bundle: EncoderBundle, pairs: Sequence[TextImagePair]):
    embeddings = {p.image_id: p.image_embedding for p in pairs}
    captions = OrderedDict((code, [(p.caption, p.image_id) for p in group])
                           for code, group in group_by_lang(pairs).items())
    return multilingual_retrieval_eval(
        captions,
        bundle.embed_texts,
        lambda ids: np.array([embeddings[i] for i in ids]),
        threads=eval_threads(),
    )


def eval_command(args):
    """Run the selected evaluation and write <task>_report.json and <task>_report.txt."""
    bundle = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.task == 'classify':
        data_path = resolve_corpus_file(args.data, 'classification')
        dataset = load_classification_dataset(data_path)
        if args.lang and args.lang not in dataset.languages:
            raise UsageError(f"classification dataset has no language {args.lang!r}")
        output = ClassifyOutput(reports=classification_reports(bundle, dataset, args.lang))
        table = format_classification_table(output.reports)
    else:
        data_path = resolve_corpus_file(args.data, 'retrieval')
        pairs = load_text_image_pairs(data_path, bundle.joint_dim)
        if args.task == 'retrieval':
            output = RetrievalOutput(reports=retrieval_reports(bundle, pairs, args.lang))
            table = format_retrieval_table(output.reports, title='Lang')
        else:
            if args.lang:
                pairs = [p for p in pairs if p.lang == args.lang]
                if not pairs:
                    raise UsageError(f"no retrieval captions for language {args.lang!r}")
            summary, reports = multilingual_reports(bundle, pairs)
            output = MultilingualOutput(summary=summary, reports=reports)
            table = format_multilingual_table(summary)

    document = output.model_dump(mode='json')
    json_path = out / f"{args.task}_report.json"
    text_path = out / f"{args.task}_report.txt"
    dump_json(document, json_path)
    with open(text_path, 'w', encoding='utf-8') as f:
        f.write(table)

    print_banner(f"Evaluation: {args.task} ({args.checkpoint.name})")
    if args.format == 'json':
        print(json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        print(table, end='')
    print(f"{'='*60}")
    print(f"✓ Report: {json_path}")
    print(f"✓ Table:  {text_path}\n")
    append_run_manifest(out, 'eval', flags_dict(args), None, [args.checkpoint, data_path], [json_path, text_path])


def load_report(path: Path):
    """Read a <task>_report.json back into its schema."""
    with open(path, encoding='utf-8') as f:
        document = json.load(f)
    return OUTPUT_MODELS[document['task']].model_validate(document)
