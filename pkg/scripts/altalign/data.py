"""
Dataset records, file formats, filtering, mixture sampling and the synthetic corpus.

All dataset files are UTF-8 JSON lines, one record per line, except the
classification dataset which is a single JSON document.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .common import MANIFEST_NAME, DataFormatError, PathLike, dump_json, json_line

logger = logging.getLogger(__name__)

PLACEHOLDER = '{}'

DEFAULT_FILE_NAMES = {
    'parallel': 'parallel.jsonl',
    'text_image': 'text_image.jsonl',
    'retrieval': 'retrieval.jsonl',
    'classification': 'classification.json',
    'vocab': 'vocab.txt',
    'lexicon': 'lexicon.json',
}


class Provenance(str, Enum):
    """Origin of a parallel pair: same-language copy, machine or human translation."""

    SAME = 'SAME'
    MT = 'MT'
    HT = 'HT'


@dataclass(frozen=True)
class ParallelPair:
    """A Stage-1 unit: the teacher reads src_text, the student reads tgt_text."""

    src_text: str
    tgt_text: str
    src_lang: str
    tgt_lang: str
    provenance: Provenance

    def __post_init__(self):
        if not self.src_text.strip() or not self.tgt_text.strip():
            raise ValueError("both texts must be nonempty")
        if self.provenance == Provenance.SAME:
            if self.src_lang != self.tgt_lang:
                raise ValueError(f"SAME pair with differing languages {self.src_lang}/{self.tgt_lang}")
            if self.src_text != self.tgt_text:
                raise ValueError("SAME pair with differing texts")

    def to_record(self) -> Dict:
        return {
            'src': self.src_text,
            'tgt': self.tgt_text,
            'src_lang': self.src_lang,
            'tgt_lang': self.tgt_lang,
            'provenance': self.provenance.value,
        }


@dataclass(frozen=True)
class TextImagePair:
    """A Stage-2 unit: a caption and the precomputed embedding of its image."""

    caption: str
    lang: str
    image_id: str
    image_embedding: Tuple[float, ...]
    aesthetic_score: Optional[float] = None

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be nonempty")
        if not self.image_embedding:
            raise ValueError("image_embedding must be nonempty")

    def to_record(self) -> Dict:
        record = {
            'caption': self.caption,
            'lang': self.lang,
            'image_id': self.image_id,
            'image_embedding': list(self.image_embedding),
        }
        if self.aesthetic_score is not None:
            record['aesthetic_score'] = self.aesthetic_score
        return record


@dataclass
class ClassificationDataset:
    """Class names and prompt templates per language, plus labelled image embeddings."""

    class_names: Dict[str, List[str]]
    templates: Dict[str, List[str]]
    items: List[Tuple[Tuple[float, ...], int]] = field(default_factory=list)

    def __post_init__(self):
        counts = {len(names) for names in self.class_names.values()}
        if len(counts) != 1 or 0 in counts:
            raise ValueError("every language must name the same, positive number of classes")
        for lang, templates in self.templates.items():
            if not templates:
                raise ValueError(f"no templates for language {lang!r}")
            for template in templates:
                if template.count(PLACEHOLDER) != 1:
                    raise ValueError(f"template {template!r} must contain exactly one {PLACEHOLDER} placeholder")
        for _, class_index in self.items:
            if not 0 <= class_index < self.num_classes:
                raise ValueError(f"class_index {class_index} outside [0, {self.num_classes})")

    @property
    def num_classes(self) -> int:
        return len(next(iter(self.class_names.values())))

    @property
    def languages(self) -> List[str]:
        return sorted(set(self.class_names) & set(self.templates))

    def prompts(self, lang: str, class_index: int) -> List[str]:
        """Every template of `lang` instantiated with class `class_index`."""
        name = self.class_names[lang][class_index]
        return [template.replace(PLACEHOLDER, name) for template in self.templates[lang]]

    def item_embeddings(self) -> np.ndarray:
        return np.array([emb for emb, _ in self.items], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def to_document(self) -> Dict:
        return {
            'class_names': self.class_names,
            'templates': self.templates,
            'items': [{'image_embedding': list(emb), 'class_index': label} for emb, label in self.items],
        }


@dataclass(frozen=True)
class MixtureSpec:
    """
    Sampling weights over provenance classes for Stage 1.

    Classes with a positive weight are enabled. Listed classes with weight 0
    never contribute items.
    """

    weights: Tuple[Tuple[Provenance, float], ...]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("mixture must list at least one provenance class")
        seen = set()
        for provenance, weight in self.weights:
            if provenance in seen:
                raise ValueError(f"provenance {provenance.value} listed twice")
            seen.add(provenance)
            if not weight >= 0 or not np.isfinite(weight):
                raise ValueError(f"weight for {provenance.value} must be a finite nonnegative number")
        if sum(weight for _, weight in self.weights) <= 0:
            raise ValueError("mixture weights must sum to a positive value")

    @classmethod
    def of(cls, weights: Mapping[Provenance, float]) -> 'MixtureSpec':
        ordered = [(p, float(weights[p])) for p in Provenance if p in weights]
        return cls(tuple(ordered))

    @classmethod
    def parse(cls, text: str) -> 'MixtureSpec':
        """
        Parse a --mixture value such as "SAME,MT:0.5,HT".

        Args:
            text: Comma-separated provenance names, each optionally ':weight' (default 1)

        Returns:
            MixtureSpec

        Raises:
            ValueError: unknown provenance or bad weight
        """
        weights: Dict[Provenance, float] = {}
        for part in text.split(','):
            part = part.strip()
            if not part:
                continue
            name, _, weight = part.partition(':')
            try:
                provenance = Provenance(name.strip().upper())
            except ValueError:
                raise ValueError(f"unknown provenance {name!r} (expected SAME, MT or HT)") from None
            if provenance in weights:
                raise ValueError(f"provenance {provenance.value} listed twice")
            try:
                weights[provenance] = float(weight) if weight else 1.0
            except ValueError:
                raise ValueError(f"bad weight {weight!r} for {provenance.value}") from None
        return cls.of(weights)

    @property
    def enabled(self) -> List[Provenance]:
        return [p for p, weight in self.weights if weight > 0]

    def probabilities(self) -> np.ndarray:
        w = np.array([weight for p, weight in self.weights if weight > 0], dtype=np.float64)
        return w / w.sum()

    def __str__(self):
        return ','.join(f"{p.value}:{weight:g}" for p, weight in self.weights)


# Loading and saving

def _read_jsonl(path: PathLike) -> Iterable[Tuple[int, Dict]]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file does not exist", path)
    with open(path, encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"malformed JSON ({e.msg})", path, line_no) from None
            if not isinstance(record, dict):
                raise DataFormatError("record must be a JSON object", path, line_no)
            yield line_no, record


def _require(record: Dict, keys: Sequence[str], path: PathLike, line_no: int):
    missing = [k for k in keys if k not in record]
    if missing:
        raise DataFormatError(f"missing field(s) {', '.join(missing)}", path, line_no)


def _string(record: Dict, key: str, path: PathLike, line_no: Optional[int] = None) -> str:
    """Return record[key], which must be a JSON string."""
    value = record[key]
    if not isinstance(value, str):
        raise DataFormatError(f"{key} must be a string, got {json.dumps(value)}", path, line_no)
    return value


def load_parallel_pairs(path: PathLike) -> List[ParallelPair]:
    """
    Load Stage-1 parallel pairs from JSONL.

    Args:
        path: File with fields src, tgt, src_lang, tgt_lang, provenance per line

    Returns:
        Pairs in file order

    Raises:
        DataFormatError: malformed line or invariant violation, with the line number
    """
    pairs = []
    for line_no, record in _read_jsonl(path):
        _require(record, ('src', 'tgt', 'src_lang', 'tgt_lang', 'provenance'), path, line_no)
        try:
            pairs.append(ParallelPair(
                src_text=_string(record, 'src', path, line_no),
                tgt_text=_string(record, 'tgt', path, line_no),
                src_lang=_string(record, 'src_lang', path, line_no),
                tgt_lang=_string(record, 'tgt_lang', path, line_no),
                provenance=Provenance(_string(record, 'provenance', path, line_no)),
            ))
        except ValueError as e:
            raise DataFormatError(str(e), path, line_no) from None
    logger.info("Loaded %d parallel pairs from %s", len(pairs), path)
    return pairs


def load_text_image_pairs(path: PathLike, dim: Optional[int] = None) -> List[TextImagePair]:
    """
    Load Stage-2 text-image pairs from JSONL.

    Args:
        path: File with fields caption, lang, image_id, image_embedding, aesthetic_score (optional)
        dim: Joint embedding dimension; defaults to the first record's length

    Returns:
        Pairs in file order

    Raises:
        DataFormatError: malformed line, wrong embedding length, or one image_id
            carrying two different embeddings
    """
    pairs = []
    seen: Dict[str, Tuple[float, ...]] = {}
    for line_no, record in _read_jsonl(path):
        _require(record, ('caption', 'lang', 'image_id', 'image_embedding'), path, line_no)
        embedding = record['image_embedding']
        if not isinstance(embedding, list) or not all(isinstance(v, (int, float)) for v in embedding):
            raise DataFormatError("image_embedding must be a list of numbers", path, line_no)
        embedding = tuple(float(v) for v in embedding)
        if dim is None:
            dim = len(embedding)
        if len(embedding) != dim:
            raise DataFormatError(f"image_embedding has length {len(embedding)}, expected {dim}", path, line_no)
        score = record.get('aesthetic_score')
        if score is not None and not isinstance(score, (int, float)):
            raise DataFormatError("aesthetic_score must be a number", path, line_no)
        image_id = _string(record, 'image_id', path, line_no)
        if image_id in seen and seen[image_id] != embedding:
            raise DataFormatError(f"image_id {image_id!r} appears with two different embeddings", path, line_no)
        seen[image_id] = embedding
        try:
            pairs.append(TextImagePair(
                caption=_string(record, 'caption', path, line_no),
                lang=_string(record, 'lang', path, line_no),
                image_id=image_id,
                image_embedding=embedding,
                aesthetic_score=None if score is None else float(score),
            ))
        except ValueError as e:
            raise DataFormatError(str(e), path, line_no) from None
    logger.info("Loaded %d text-image pairs from %s", len(pairs), path)
    return pairs


def _string_list(values, what: str, path: PathLike) -> List[str]:
    """Return `values`, which must be a JSON list of strings."""
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise DataFormatError(f"{what} must be a list of strings", path)
    return list(values)


def load_classification_dataset(path: PathLike) -> ClassificationDataset:
    """Load a classification dataset document (class_names, templates, items)."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file does not exist", path)
    try:
        with open(path, encoding='utf-8') as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"malformed JSON at line {e.lineno} ({e.msg})", path) from None
    if not isinstance(doc, dict) or not {'class_names', 'templates', 'items'} <= set(doc):
        raise DataFormatError("expected an object with class_names, templates and items", path)
    try:
        items = [(tuple(float(v) for v in item['image_embedding']), int(item['class_index']))
                 for item in doc['items']]
        return ClassificationDataset(
            class_names={k: _string_list(v, f"class_names[{k!r}]", path) for k, v in doc['class_names'].items()},
            templates={k: _string_list(v, f"templates[{k!r}]", path) for k, v in doc['templates'].items()},
            items=items,
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise DataFormatError(f"invalid classification dataset: {e}", path) from None


def save_parallel_pairs(pairs: Iterable[ParallelPair], path: PathLike):
    with open(path, 'w', encoding='utf-8') as f:
        for pair in pairs:
            f.write(json_line(pair.to_record()) + '\n')


def save_text_image_pairs(pairs: Iterable[TextImagePair], path: PathLike):
    with open(path, 'w', encoding='utf-8') as f:
        for pair in pairs:
            f.write(json_line(pair.to_record()) + '\n')


def save_classification_dataset(dataset: ClassificationDataset, path: PathLike):
    dump_json(dataset.to_document(), path)


# Filtering and batching

def filter_by_aesthetic(pairs: Sequence[TextImagePair],
                        threshold: Union[float, Mapping[str, float]]) -> List[TextImagePair]:
    """
    Keep pairs whose aesthetic score is strictly greater than the threshold.

    Pairs without a score are kept as already filtered upstream. A mapping
    gives one threshold per language; languages it does not name are kept.
    Order is preserved.
    """
    kept = []
    for pair in pairs:
        if isinstance(threshold, Mapping):
            bound = threshold.get(pair.lang)
        else:
            bound = threshold
        if bound is None or pair.aesthetic_score is None or pair.aesthetic_score > bound:
            kept.append(pair)
    logger.info("Aesthetic filter kept %d of %d pairs", len(kept), len(pairs))
    return kept


def group_by_provenance(pairs: Iterable[ParallelPair]) -> Dict[Provenance, List[ParallelPair]]:
    """Split pairs into one pool per provenance class, every class present (possibly empty)."""
    pools: Dict[Provenance, List[ParallelPair]] = {p: [] for p in Provenance}
    for pair in pairs:
        pools[pair.provenance].append(pair)
    return pools


def sample_batch(pools: Mapping[Provenance, Sequence[ParallelPair]], spec: MixtureSpec,
                 batch_size: int, rng: np.random.Generator) -> List[ParallelPair]:
    """
    Draw a Stage-1 batch i.i.d. from the mixture.

    Each item first picks an enabled provenance class by normalized weight,
    then a uniform pair within that class.

    Args:
        pools: Pairs grouped by provenance
        spec: Mixture weights
        batch_size: Number of draws
        rng: Generator whose state advances with every call

    Returns:
        batch_size pairs

    Raises:
        DataFormatError: an enabled class has no pairs
    """
    classes = spec.enabled
    for provenance in classes:
        if not pools.get(provenance):
            raise DataFormatError(f"mixture enables {provenance.value} but the corpus has no {provenance.value} pairs")
    picks = rng.choice(len(classes), size=batch_size, p=spec.probabilities())
    batch = []
    for pick in picks:
        pool = pools[classes[pick]]
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


def epoch_batches(pairs: Sequence[TextImagePair], batch_size: int,
                  rng: np.random.Generator) -> List[List[TextImagePair]]:
    """
    Split one Stage-2 epoch into batches without repeated images.

    The pair list is shuffled jointly across languages, then packed greedily:
    a pair whose image is already in the open batch waits for the next one.
    The trailing partial batch is dropped.
    """
    remaining = [pairs[i] for i in rng.permutation(len(pairs))]
    batches = []
    while remaining:
        batch, images, rest = [], set(), []
        for pair in remaining:
            if len(batch) < batch_size and pair.image_id not in images:
                batch.append(pair)
                images.add(pair.image_id)
            else:
                rest.append(pair)
        if len(batch) < batch_size:
            break
        batches.append(batch)
        remaining = rest
    return batches


# Synthetic corpus

class SynthConfig(BaseModel):
    """Sizes and seed of a synthetic corpus; the first language is the teacher-side source."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    seed: int = 7
    concepts: int = Field(10, gt=0)
    langs: Tuple[str, ...] = ('en', 'zh')
    dim: int = Field(32, gt=0)
    pairs_per_class: int = Field(600, gt=0)
    captions_per_concept: int = Field(20, gt=0)
    heldout_per_concept: int = Field(2, gt=0)
    items_per_class: int = Field(5, gt=0)
    fillers_per_lang: int = Field(6, gt=0)
    max_fillers: int = Field(2, ge=0)

    @field_validator('langs')
    @classmethod
    def _check_langs(cls, langs):
        if not langs:
            raise ValueError("at least one language is required")
        if len(set(langs)) != len(langs):
            raise ValueError("languages must be distinct")
        for lang in langs:
            if not lang or not lang.isalnum():
                raise ValueError(f"bad language code {lang!r}")
        return tuple(langs)

    @property
    def source_lang(self) -> str:
        return self.langs[0]

    @property
    def target_langs(self) -> Tuple[str, ...]:
        return self.langs[1:]


_CONSONANTS = 'bdfghjklmnprstvz'
_VOWELS = 'aeiou'


class _Lexicon:
    """Pseudo-words per language: one per concept plus a few fillers."""

    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        used = set()
        self.concepts: Dict[str, List[str]] = {}
        self.fillers: Dict[str, List[str]] = {}
        for lang in config.langs:
            self.concepts[lang] = [self._word(rng, used) for _ in range(config.concepts)]
            self.fillers[lang] = [self._word(rng, used) for _ in range(config.fillers_per_lang)]

    @staticmethod
    def _word(rng: np.random.Generator, used: set) -> str:
        while True:
            syllables = int(rng.integers(2, 4))
            word = ''.join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                           for _ in range(syllables))
            if word not in used:
                used.add(word)
                return word


def _concept_embeddings(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    while True:
        emb = rng.standard_normal((config.concepts, config.dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        cos = emb @ emb.T
        np.fill_diagonal(cos, -1.0)
        if config.concepts == 1 or cos.max() < 0.99:
            return emb


def _sentence(config: SynthConfig, rng: np.random.Generator, concept: int) -> List[Tuple[str, int]]:
    """A concept token among 0..max_fillers filler tokens, as (kind, index) symbols."""
    fillers = [('f', int(rng.integers(config.fillers_per_lang)))
               for _ in range(int(rng.integers(config.max_fillers + 1)))]
    position = int(rng.integers(len(fillers) + 1))
    return fillers[:position] + [('c', concept)] + fillers[position:]


def _render(lexicon: _Lexicon, lang: str, symbols: Sequence[Tuple[str, int]]) -> str:
    return ' '.join(lexicon.concepts[lang][i] if kind == 'c' else lexicon.fillers[lang][i] for kind, i in symbols)


def _rounded(vector: np.ndarray) -> Tuple[float, ...]:
    return tuple(round(float(v), 8) for v in vector)


def image_id_for(concept: int) -> str:
    return f"img{concept:04d}"


def gen_synthetic_corpus(config: SynthConfig, out_dir: PathLike) -> Dict[str, Path]:
    """
    Write a deterministic synthetic corpus that is learnable by construction.

    Each concept has one pseudo-word per language and one unit-norm image
    embedding. Captions are the concept word among a few fillers. MT pairs
    translate word by word into the target languages in turn; HT pairs also
    shuffle the translated word order.

    Args:
        config: Corpus sizes and seed
        out_dir: Directory to write into (created if missing)

    Returns:
        Map of file role to written path, also recorded in manifest.json
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_seq, heldout_seq, classify_seq = np.random.SeedSequence(config.seed).spawn(3)
    rng = np.random.default_rng(corpus_seq)

    lexicon = _Lexicon(config, rng)
    embeddings = _concept_embeddings(config, rng)
    image_embs = [_rounded(e) for e in embeddings]
    src = config.source_lang

    parallel: List[ParallelPair] = []
    for provenance in Provenance:
        if provenance != Provenance.SAME and not config.target_langs:
            logger.warning("Single-language corpus: no %s pairs generated", provenance.value)
            continue
        for i in range(config.pairs_per_class):
            symbols = _sentence(config, rng, int(rng.integers(config.concepts)))
            src_text = _render(lexicon, src, symbols)
            if provenance == Provenance.SAME:
                parallel.append(ParallelPair(src_text, src_text, src, src, provenance))
                continue
            tgt = config.target_langs[i % len(config.target_langs)]
            tgt_symbols = symbols
            if provenance == Provenance.HT:
                tgt_symbols = [symbols[j] for j in rng.permutation(len(symbols))]
            parallel.append(ParallelPair(src_text, _render(lexicon, tgt, tgt_symbols), src, tgt, provenance))

    def captions(stream: np.random.Generator, per_concept: int) -> List[TextImagePair]:
        pairs = []
        for lang in config.langs:
            for concept in range(config.concepts):
                for _ in range(per_concept):
                    pairs.append(TextImagePair(
                        caption=_render(lexicon, lang, _sentence(config, stream, concept)),
                        lang=lang,
                        image_id=image_id_for(concept),
                        image_embedding=image_embs[concept],
                        aesthetic_score=round(float(stream.uniform(4.0, 8.0)), 2),
                    ))
        return pairs

    text_image = captions(rng, config.captions_per_concept)
    retrieval = captions(np.random.default_rng(heldout_seq), config.heldout_per_concept)

    classify_rng = np.random.default_rng(classify_seq)
    templates = {}
    for lang in config.langs:
        f = lexicon.fillers[lang]
        templates[lang] = [PLACEHOLDER, f"{f[0]} {PLACEHOLDER}", f"{PLACEHOLDER} {f[1 % len(f)]}"]
    items = []
    for concept in range(config.concepts):
        for _ in range(config.items_per_class):
            noisy = embeddings[concept] + 0.02 * classify_rng.standard_normal(config.dim)
            items.append((_rounded(noisy / np.linalg.norm(noisy)), concept))
    classification = ClassificationDataset(
        class_names={lang: list(lexicon.concepts[lang]) for lang in config.langs},
        templates=templates,
        items=items,
    )

    paths = {role: out_dir / name for role, name in DEFAULT_FILE_NAMES.items()}
    save_parallel_pairs(parallel, paths['parallel'])
    save_text_image_pairs(text_image, paths['text_image'])
    save_text_image_pairs(retrieval, paths['retrieval'])
    save_classification_dataset(classification, paths['classification'])

    from .encoders import RESERVED_TOKENS
    words = [w for lang in config.langs for w in lexicon.concepts[lang] + lexicon.fillers[lang]]
    with open(paths['vocab'], 'w', encoding='utf-8') as f:
        for token in list(RESERVED_TOKENS) + words:
            f.write(token + '\n')
    dump_json({
        'source_lang': src,
        'concepts': lexicon.concepts,
        'fillers': lexicon.fillers,
        'image_ids': [image_id_for(k) for k in range(config.concepts)],
    }, paths['lexicon'])
    dump_json({
        'config': config.model_dump(mode='json'),
        'files': {role: path.name for role, path in paths.items()},
    }, out_dir / MANIFEST_NAME)
    paths['manifest'] = out_dir / MANIFEST_NAME

    logger.info("Synthetic corpus: %d parallel, %d text-image, %d retrieval pairs in %s",
                len(parallel), len(text_image), len(retrieval), out_dir)
    return paths


def load_lexicon(path: PathLike) -> Dict:
    """
    Load the lexicon written by gen_synthetic_corpus.

    Raises:
        DataFormatError: missing file, malformed JSON, or missing source_lang, concepts or image_ids
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file does not exist", path)
    with open(path, encoding='utf-8') as f:
        try:
            lexicon = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"malformed JSON ({e.msg})", path) from None
    if not {'concepts', 'image_ids', 'source_lang'} <= set(lexicon):
        raise DataFormatError("lexicon must carry source_lang, concepts and image_ids", path)
    return lexicon
