"""
Evaluation metrics: zero-shot classification, cross-modal retrieval and
per-language retrieval.

Scores are cosine similarities. Rankings break ties toward the lower
candidate index everywhere. Reports keep full precision; only the text
tables round, to one decimal, half to even.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .common import DataFormatError
from .data import ClassificationDataset
from .tensor import ZeroNormError

logger = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)

EmbedFn = Callable[[Sequence[str]], np.ndarray]


class ClassificationReport(BaseModel):
    model_config = ConfigDict(extra='forbid')

    accuracy: float = Field(ge=0, le=100)
    mean_per_class: float = Field(ge=0, le=100)
    mean_top1_top5: float = Field(ge=0, le=100)

    @model_validator(mode='after')
    def _top5_not_below_top1(self):
        if self.mean_top1_top5 < self.accuracy - 1e-9:
            raise ValueError("mean_top1_top5 must not be below accuracy")
        return self


class RetrievalReport(BaseModel):
    """Recall@K in both directions and their mean, as percentages."""

    model_config = ConfigDict(extra='forbid')

    t2i_recall: Dict[int, float]
    i2t_recall: Dict[int, float]
    mean_recall: float = Field(ge=0, le=100)

    @model_validator(mode='after')
    def _check_recalls(self):
        for direction in (self.t2i_recall, self.i2t_recall):
            if sorted(direction) != list(RECALL_KS):
                raise ValueError(f"recall keys must be {RECALL_KS}")
            values = [direction[k] for k in RECALL_KS]
            if any(not 0 <= v <= 100 for v in values):
                raise ValueError("recall values must lie in [0, 100]")
            if any(a > b for a, b in zip(values, values[1:])):
                raise ValueError("recall must be nondecreasing in K")
        if abs(self.mean_recall - mean_recall(self.six_values())) > 1e-9:
            raise ValueError("mean_recall must be the mean of the six recall values")
        return self

    def six_values(self) -> List[float]:
        return [self.t2i_recall[k] for k in RECALL_KS] + [self.i2t_recall[k] for k in RECALL_KS]


class MultilingualRetrievalReport(BaseModel):
    """Image-to-text recall@10 per language over one shared image set."""

    model_config = ConfigDict(extra='forbid')

    i2t_recall_at_10: Dict[str, float]

    @model_validator(mode='after')
    def _check_range(self):
        if any(not 0 <= v <= 100 for v in self.i2t_recall_at_10.values()):
            raise ValueError("recall values must lie in [0, 100]")
        return self


def mean_recall(values: Sequence[float]) -> float:
    """Arithmetic mean of unrounded recall values."""
    if not values:
        raise ValueError("mean_recall needs at least one value")
    return math.fsum(values) / len(values)


def format_percent(value: float) -> str:
    """
    One-decimal rendering: absorb binary noise at 1e-6, then round half to even.

    87.65 renders as "87.6" whichever side of .65 its binary value lands on.
    """
    exact = Decimal(repr(float(value))).quantize(Decimal('1e-6'), rounding=ROUND_HALF_EVEN)
    return str(exact.quantize(Decimal('0.1'), rounding=ROUND_HALF_EVEN))


# Scoring

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Pairwise cosine similarity of the rows of a [n, d] and b [m, d].

    Raises:
        ZeroNormError: a row has zero norm
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_similarity needs [n, d] and [m, d], got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroNormError("cannot score a zero-norm embedding")
    return (a / na) @ (b / nb).T


def rank_positions(scores: np.ndarray) -> np.ndarray:
    """
    Position of every candidate in each row's ranking (0 = best).

    Higher score ranks first; equal scores rank by lower index first.
    """
    order = np.argsort(-scores, axis=1, kind='stable')
    positions = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    positions[rows, order] = np.arange(scores.shape[1])[None, :]
    return positions


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("cannot normalize a zero-norm embedding")
    return x / norms


# Classification

def class_prototypes(dataset: ClassificationDataset, lang: str, embed_fn: EmbedFn) -> np.ndarray:
    """
    One unit prototype per class for `lang`.

    Every template is filled with the class name and embedded; the embeddings
    are normalized, averaged and normalized again.

    Args:
        dataset: Class names and templates
        lang: Language to build prototypes for
        embed_fn: Maps a list of texts to a [n, d] array

    Returns:
        [C, d] array of unit rows

    Raises:
        DataFormatError: the dataset has no class names or templates for `lang`
    """
    if lang not in dataset.class_names or lang not in dataset.templates:
        raise DataFormatError(f"classification dataset has no class names or templates for language {lang!r}")
    prompts = [dataset.prompts(lang, c) for c in range(dataset.num_classes)]
    per_class = len(prompts[0])
    flat = [text for group in prompts for text in group]
    embeddings = _normalize_rows(np.asarray(embed_fn(flat), dtype=np.float64))
    averaged = embeddings.reshape(dataset.num_classes, per_class, -1).mean(axis=1)
    return _normalize_rows(averaged)


def zero_shot_classify(items: np.ndarray, labels: Sequence[int], prototypes: np.ndarray) -> ClassificationReport:
    """
    Classify items by their most similar prototype.

    Args:
        items: [n, d] image embeddings
        labels: True class per item
        prototypes: [C, d] class prototypes

    Returns:
        ClassificationReport with accuracy, mean per-class recall over classes
        that have items, and the mean of top-1 and top-5 accuracy
    """
    prototypes = np.asarray(prototypes)
    if prototypes.ndim != 2 or prototypes.shape[0] < 1:
        raise DataFormatError("zero_shot_classify needs at least one class prototype")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DataFormatError("zero_shot_classify needs at least one item")
    positions = rank_positions(cosine_similarity(items, prototypes))
    label_positions = positions[np.arange(len(labels)), labels]
    top1 = label_positions == 0
    top5 = label_positions < 5
    per_class = [top1[labels == c].mean() for c in np.unique(labels)]
    accuracy = 100.0 * top1.mean()
    return ClassificationReport(
        accuracy=accuracy,
        mean_per_class=100.0 * float(np.mean(per_class)),
        mean_top1_top5=(accuracy + 100.0 * top5.mean()) / 2.0,
    )


def evaluate_classification(dataset: ClassificationDataset, lang: str, embed_fn: EmbedFn) -> ClassificationReport:
    prototypes = class_prototypes(dataset, lang, embed_fn)
    return zero_shot_classify(dataset.item_embeddings(), dataset.labels(), prototypes)


# Retrieval

def _recall(positions: np.ndarray, relevant: List[List[int]], direction: str) -> Dict[int, float]:
    best = np.empty(len(relevant), dtype=np.int64)
    for q, candidates in enumerate(relevant):
        if not candidates:
            raise DataFormatError(f"{direction} query {q} has no relevant item")
        best[q] = positions[q, candidates].min()
    return {k: 100.0 * float(np.mean(best < k)) for k in RECALL_KS}


def retrieval_eval(text_embs: np.ndarray, img_embs: np.ndarray,
                   relevance: Sequence[Tuple[int, int]]) -> RetrievalReport:
    """
    Bidirectional Recall@{1,5,10} and Mean Recall.

    Text-to-image queries are the texts; image-to-text queries are the images,
    each relevant to all of its captions.

    Args:
        text_embs: [N_t, d]
        img_embs: [N_i, d]
        relevance: (text index, image index) ground-truth pairs

    Raises:
        DataFormatError: empty query set, or a query without a relevant item
    """
    text_embs = np.asarray(text_embs)
    img_embs = np.asarray(img_embs)
    if len(text_embs) == 0 or len(img_embs) == 0:
        raise DataFormatError("retrieval_eval needs at least one text and one image")
    scores = cosine_similarity(text_embs, img_embs)
    text_relevant: List[List[int]] = [[] for _ in range(len(text_embs))]
    image_relevant: List[List[int]] = [[] for _ in range(len(img_embs))]
    for t, i in relevance:
        text_relevant[t].append(i)
        image_relevant[i].append(t)
    t2i = _recall(rank_positions(scores), text_relevant, 'text-to-image')
    i2t = _recall(rank_positions(scores.T), image_relevant, 'image-to-text')
    return RetrievalReport(
        t2i_recall=t2i,
        i2t_recall=i2t,
        mean_recall=mean_recall([t2i[k] for k in RECALL_KS] + [i2t[k] for k in RECALL_KS]),
    )


def relevance_from_ids(caption_image_ids: Sequence[str], image_ids: Sequence[str]) -> List[Tuple[int, int]]:
    """Pair every caption index with the index of its image in `image_ids`."""
    index = {image_id: i for i, image_id in enumerate(image_ids)}
    unknown = sorted(set(caption_image_ids) - set(index))
    if unknown:
        raise DataFormatError(f"captions refer to unknown image ids: {', '.join(unknown[:5])}")
    return [(t, index[image_id]) for t, image_id in enumerate(caption_image_ids)]


def multilingual_retrieval_eval(captions_by_lang: Mapping[str, Sequence[Tuple[str, str]]],
                                embed_fn: EmbedFn, image_lookup: Callable[[Sequence[str]], np.ndarray],
                                threads: int = 1) -> Tuple[MultilingualRetrievalReport, Dict[str, RetrievalReport]]:
    """
    Per-language retrieval over one shared image set.

    Args:
        captions_by_lang: lang -> list of (caption, image id)
        embed_fn: Text encoder for inference
        image_lookup: Maps image ids to their embeddings
        threads: Languages evaluated concurrently

    Returns:
        (report of image-to-text recall@10 per language, full report per language)

    Raises:
        DataFormatError: languages cover different image ids
    """
    if not captions_by_lang:
        raise DataFormatError("multilingual_retrieval_eval needs at least one language")
    languages = list(captions_by_lang)
    image_ids: List[str] = []
    for _, image_id in captions_by_lang[languages[0]]:
        if image_id not in image_ids:
            image_ids.append(image_id)
    for lang in languages[1:]:
        covered = {image_id for _, image_id in captions_by_lang[lang]}
        if covered != set(image_ids):
            raise DataFormatError(f"language {lang!r} covers different images than {languages[0]!r}")
    img_embs = np.asarray(image_lookup(image_ids))

    def evaluate(lang: str) -> RetrievalReport:
        captions = captions_by_lang[lang]
        text_embs = embed_fn([caption for caption, _ in captions])
        return retrieval_eval(text_embs, img_embs, relevance_from_ids([i for _, i in captions], image_ids))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        reports = dict(zip(languages, pool.map(evaluate, languages)))
    for lang, report in reports.items():
        logger.info("%s: i2t R@10 %.2f, MR %.2f", lang, report.i2t_recall[10], report.mean_recall)
    summary = MultilingualRetrievalReport(i2t_recall_at_10={lang: reports[lang].i2t_recall[10] for lang in languages})
    return summary, reports


# Tables

def format_retrieval_table(reports: Mapping[str, RetrievalReport], title: str = 'Retrieval') -> str:
    """Rows per dataset/language; Text-to-Image and Image-to-Text recall columns, then MR."""
    name_width = max([len(title)] + [len(n) for n in reports]) + 2
    head1 = f"{'':<{name_width}}{'Text-to-Image':^21}{'Image-to-Text':^21}{'':>6}"
    head2 = f"{title:<{name_width}}" + ''.join(f"{f'R@{k}':>7}" for k in RECALL_KS) * 2 + f"{'MR':>7}"
    lines = [head1, head2, '-' * len(head2)]
    for name, report in reports.items():
        cells = [format_percent(v) for v in report.six_values()] + [format_percent(report.mean_recall)]
        lines.append(f"{name:<{name_width}}" + ''.join(f"{c:>7}" for c in cells))
    return '\n'.join(lines) + '\n'


def format_multilingual_table(report: MultilingualRetrievalReport) -> str:
    """Languages as columns, one row of image-to-text recall@10."""
    langs = list(report.i2t_recall_at_10)
    width = max([6] + [len(lang) + 2 for lang in langs])
    head = f"{'':<10}" + ''.join(f"{lang:>{width}}" for lang in langs)
    row = f"{'I2T R@10':<10}" + ''.join(f"{format_percent(report.i2t_recall_at_10[lang]):>{width}}" for lang in langs)
    return '\n'.join([head, '-' * len(head), row]) + '\n'


def format_classification_table(reports: Mapping[str, ClassificationReport]) -> str:
    head = f"{'Lang':<8}{'Acc':>8}{'MPC':>8}{'Top1/5':>8}"
    lines = [head, '-' * len(head)]
    for lang, report in reports.items():
        lines.append(f"{lang:<8}{format_percent(report.accuracy):>8}"
                     f"{format_percent(report.mean_per_class):>8}{format_percent(report.mean_top1_top5):>8}")
    return '\n'.join(lines) + '\n'
