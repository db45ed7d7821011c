'''
Unit tests for dataset records, loaders, filtering, sampling and the synthetic corpus.
'''

import json

import numpy as np
import pytest

from scripts.altalign.common import DataFormatError
from scripts.altalign.data import (ClassificationDataset, MixtureSpec, ParallelPair, Provenance, SynthConfig,
                                   TextImagePair, epoch_batches, filter_by_aesthetic, gen_synthetic_corpus,
                                   group_by_provenance, load_classification_dataset, load_lexicon, load_parallel_pairs,
                                   load_text_image_pairs, sample_batch, save_classification_dataset,
                                   save_parallel_pairs, save_text_image_pairs)


def _pair(score, lang='zh', image_id='img0'):
    return TextImagePair(caption='x', lang=lang, image_id=image_id, image_embedding=(1.0, 0.0),
                         aesthetic_score=score)


def _write_lines(path, lines):
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


# -------------------------------------------------------------------------------------------------
# Loaders
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestLoadParallelPairs:
    '''Test suite for load_parallel_pairs.'''

    def test_single_same_pair(self, tmp_path):
        path = _write_lines(tmp_path / 'p.jsonl', [
            '{"src":"a dog","tgt":"a dog","src_lang":"en","tgt_lang":"en","provenance":"SAME"}'])
        pairs = load_parallel_pairs(path)
        assert pairs == [ParallelPair('a dog', 'a dog', 'en', 'en', Provenance.SAME)]

    def test_same_with_differing_texts_reports_line(self, tmp_path):
        path = _write_lines(tmp_path / 'p.jsonl', [
            '{"src":"a dog","tgt":"a dog","src_lang":"en","tgt_lang":"en","provenance":"SAME"}',
            '{"src":"a dog","tgt":"a cat","src_lang":"en","tgt_lang":"en","provenance":"SAME"}'])
        with pytest.raises(DataFormatError, match=r'p\.jsonl:2:'):
            load_parallel_pairs(path)

    def test_malformed_json_reports_line(self, tmp_path):
        path = _write_lines(tmp_path / 'p.jsonl', [
            '{"src":"a","tgt":"b","src_lang":"en","tgt_lang":"zh","provenance":"MT"}',
            '{"src": "a",'])
        with pytest.raises(DataFormatError, match=r':2: malformed JSON'):
            load_parallel_pairs(path)

    def test_unknown_provenance(self, tmp_path):
        path = _write_lines(tmp_path / 'p.jsonl', [
            '{"src":"a","tgt":"b","src_lang":"en","tgt_lang":"zh","provenance":"XX"}'])
        with pytest.raises(DataFormatError, match=':1:'):
            load_parallel_pairs(path)

    def test_missing_field(self, tmp_path):
        path = _write_lines(tmp_path / 'p.jsonl', ['{"src":"a","tgt":"b"}'])
        with pytest.raises(DataFormatError, match='missing field'):
            load_parallel_pairs(path)

    @pytest.mark.parametrize('field, value', [('src', 'null'), ('tgt', '42'), ('tgt_lang', '["zh"]')])
    def test_non_string_field_rejected(self, tmp_path, field, value):
        record = {'src': '"a"', 'tgt': '"b"', 'src_lang': '"en"', 'tgt_lang': '"zh"', 'provenance': '"MT"'}
        record[field] = value
        path = _write_lines(tmp_path / 'p.jsonl', ['{' + ','.join(f'"{k}":{v}' for k, v in record.items()) + '}'])
        with pytest.raises(DataFormatError, match=f':1: {field} must be a string'):
            load_parallel_pairs(path)

    def test_empty_text_rejected(self, tmp_path):
        path = _write_lines(tmp_path / 'p.jsonl', [
            '{"src":"","tgt":"b","src_lang":"en","tgt_lang":"zh","provenance":"MT"}'])
        with pytest.raises(DataFormatError, match='nonempty'):
            load_parallel_pairs(path)

    def test_thousand_generated_lines_round_trip(self, corpus, tmp_path):
        pairs = corpus['parallel'][:1000]
        path = tmp_path / 'thousand.jsonl'
        save_parallel_pairs(pairs, path)
        assert load_parallel_pairs(path) == pairs


@pytest.mark.unit
class TestLoadTextImagePairs:
    '''Test suite for load_text_image_pairs.'''

    def test_optional_score(self, tmp_path):
        path = _write_lines(tmp_path / 't.jsonl', [
            '{"caption":"a dog","lang":"en","image_id":"i1","image_embedding":[1,0]}',
            '{"caption":"gou","lang":"zh","image_id":"i1","image_embedding":[1,0],"aesthetic_score":5.9}'])
        pairs = load_text_image_pairs(path)
        assert pairs[0].aesthetic_score is None
        assert pairs[1].aesthetic_score == 5.9
        assert pairs[1].image_embedding == (1.0, 0.0)

    def test_wrong_dimension(self, tmp_path):
        path = _write_lines(tmp_path / 't.jsonl', [
            '{"caption":"a","lang":"en","image_id":"i1","image_embedding":[1,0,0]}'])
        with pytest.raises(DataFormatError, match='expected 2'):
            load_text_image_pairs(path, dim=2)

    def test_shared_image_id_must_share_embedding(self, tmp_path):
        path = _write_lines(tmp_path / 't.jsonl', [
            '{"caption":"a","lang":"en","image_id":"i1","image_embedding":[1,0]}',
            '{"caption":"b","lang":"en","image_id":"i1","image_embedding":[0,1]}'])
        with pytest.raises(DataFormatError, match=':2:.*two different embeddings'):
            load_text_image_pairs(path)

    def test_null_caption_rejected(self, tmp_path):
        path = _write_lines(tmp_path / 't.jsonl', [
            '{"caption":null,"lang":"en","image_id":"i1","image_embedding":[1,0]}'])
        with pytest.raises(DataFormatError, match=':1: caption must be a string, got null'):
            load_text_image_pairs(path)

    def test_numeric_image_id_rejected(self, tmp_path):
        path = _write_lines(tmp_path / 't.jsonl', [
            '{"caption":"a","lang":"en","image_id":7,"image_embedding":[1,0]}'])
        with pytest.raises(DataFormatError, match='image_id must be a string'):
            load_text_image_pairs(path)

    def test_empty_image_id(self, tmp_path):
        path = _write_lines(tmp_path / 't.jsonl', [
            '{"caption":"a","lang":"en","image_id":"","image_embedding":[1,0]}'])
        with pytest.raises(DataFormatError, match='image_id'):
            load_text_image_pairs(path)


@pytest.mark.unit
class TestClassificationDataset:
    '''Test suite for the classification dataset type and loader.'''

    def test_template_needs_one_placeholder(self):
        with pytest.raises(ValueError, match='exactly one'):
            ClassificationDataset({'en': ['dog']}, {'en': ['{} and {}']}, [])

    def test_class_index_in_range(self):
        with pytest.raises(ValueError, match='class_index'):
            ClassificationDataset({'en': ['dog']}, {'en': ['a {}']}, [((1.0, 0.0), 1)])

    def test_prompts_fill_placeholder(self):
        dataset = ClassificationDataset({'en': ['dog', 'cat']}, {'en': ['{}', 'a photo of a {}']}, [])
        assert dataset.prompts('en', 1) == ['cat', 'a photo of a cat']

    def test_loader_rejects_non_string_class_name(self, tmp_path):
        path = tmp_path / 'c.json'
        path.write_text(json.dumps({'class_names': {'en': ['dog', None]}, 'templates': {'en': ['a {}']},
                                    'items': []}))
        with pytest.raises(DataFormatError, match='list of strings'):
            load_classification_dataset(path)

    def test_loader_reports_bad_document(self, tmp_path):
        path = tmp_path / 'c.json'
        path.write_text(json.dumps({'class_names': {'en': ['a']}, 'templates': {'en': ['x']}, 'items': []}))
        with pytest.raises(DataFormatError, match='placeholder'):
            load_classification_dataset(path)


@pytest.mark.unit
class TestReserialization:
    '''Loading then saving reproduces the generated files byte for byte.'''

    def test_parallel(self, corpus_dir, tmp_path):
        save_parallel_pairs(load_parallel_pairs(corpus_dir / 'parallel.jsonl'), tmp_path / 'p.jsonl')
        assert (tmp_path / 'p.jsonl').read_bytes() == (corpus_dir / 'parallel.jsonl').read_bytes()

    def test_text_image(self, corpus_dir, tmp_path):
        save_text_image_pairs(load_text_image_pairs(corpus_dir / 'text_image.jsonl'), tmp_path / 't.jsonl')
        assert (tmp_path / 't.jsonl').read_bytes() == (corpus_dir / 'text_image.jsonl').read_bytes()

    def test_classification(self, corpus_dir, tmp_path):
        save_classification_dataset(load_classification_dataset(corpus_dir / 'classification.json'),
                                    tmp_path / 'c.json')
        assert (tmp_path / 'c.json').read_bytes() == (corpus_dir / 'classification.json').read_bytes()


# -------------------------------------------------------------------------------------------------
# Filtering and sampling
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestFilterByAesthetic:
    '''Test suite for filter_by_aesthetic.'''

    def test_strictly_greater(self):
        pairs = [_pair(5.4), _pair(5.5), _pair(5.6)]
        assert [p.aesthetic_score for p in filter_by_aesthetic(pairs, 5.5)] == [5.6]

    def test_very_small_threshold_is_identity(self):
        pairs = [_pair(s) for s in (0.0, 3.2, 9.9)]
        assert filter_by_aesthetic(pairs, -1e300) == pairs

    def test_missing_score_kept(self):
        pairs = [_pair(None), _pair(1.0)]
        assert filter_by_aesthetic(pairs, 5.0) == [pairs[0]]

    def test_per_language_thresholds(self):
        pairs = [_pair(5.8, 'zh'), _pair(5.8, 'en'), _pair(6.1, 'en'), _pair(1.0, 'de')]
        kept = filter_by_aesthetic(pairs, {'zh': 5.5, 'en': 6.0})
        assert kept == [pairs[0], pairs[2], pairs[3]]

    def test_random_scores_match_predicate_and_keep_order(self, rng):
        for _ in range(100):
            scores = rng.uniform(0, 10, size=30).round(1)
            threshold = float(np.round(rng.uniform(0, 10), 1))
            pairs = [_pair(float(s), image_id=f"i{i}") for i, s in enumerate(scores)]
            kept = filter_by_aesthetic(pairs, threshold)
            assert kept == [p for p in pairs if p.aesthetic_score > threshold]


@pytest.mark.unit
class TestMixtureSpec:
    '''Test suite for MixtureSpec.'''

    def test_parse_with_weights(self):
        spec = MixtureSpec.parse('SAME,mt:0.5')
        assert spec.enabled == [Provenance.SAME, Provenance.MT]
        np.testing.assert_allclose(spec.probabilities(), [2 / 3, 1 / 3])

    def test_zero_weight_class_not_enabled(self):
        assert MixtureSpec.parse('SAME:1,MT:0').enabled == [Provenance.SAME]

    def test_unknown_class(self):
        with pytest.raises(ValueError, match='unknown provenance'):
            MixtureSpec.parse('SAME,XX')

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match='positive'):
            MixtureSpec.parse('SAME:0,MT:0')

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            MixtureSpec.parse('SAME:-1,MT:2')


@pytest.mark.unit
class TestSampleBatch:
    '''Test suite for sample_batch.'''

    @pytest.fixture
    def pools(self, corpus):
        return group_by_provenance(corpus['parallel'])

    def test_group_by_provenance_keeps_every_class(self):
        pools = group_by_provenance([ParallelPair('a', 'a', 'en', 'en', Provenance.SAME)])
        assert set(pools) == set(Provenance)
        assert pools[Provenance.MT] == [] and len(pools[Provenance.SAME]) == 1

    def test_single_enabled_class(self, pools):
        batch = sample_batch(pools, MixtureSpec.parse('HT'), 64, np.random.default_rng(1))
        assert len(batch) == 64
        assert {p.provenance for p in batch} == {Provenance.HT}

    def test_zero_weight_never_sampled(self, pools):
        rng = np.random.default_rng(2)
        for _ in range(20):
            batch = sample_batch(pools, MixtureSpec.parse('SAME:1,MT:0'), 32, rng)
            assert all(p.provenance == Provenance.SAME for p in batch)

    def test_equal_weights_fraction(self, pools):
        batch = sample_batch(pools, MixtureSpec.parse('SAME,MT'), 10_000, np.random.default_rng(3))
        fraction = sum(p.provenance == Provenance.SAME for p in batch) / len(batch)
        assert abs(fraction - 0.5) <= 0.02

    def test_reproducible(self, pools):
        spec = MixtureSpec.parse('SAME,MT,HT')
        first = sample_batch(pools, spec, 50, np.random.default_rng(11))
        second = sample_batch(pools, spec, 50, np.random.default_rng(11))
        assert first == second

    def test_empty_enabled_class(self, pools):
        pools = dict(pools)
        pools[Provenance.HT] = []
        with pytest.raises(DataFormatError, match='no HT pairs'):
            sample_batch(pools, MixtureSpec.parse('SAME,HT'), 4, np.random.default_rng(0))


@pytest.mark.unit
class TestEpochBatches:
    '''Test suite for Stage-2 epoch batching.'''

    def test_batches_have_distinct_images(self, corpus):
        batches = epoch_batches(corpus['text_image'], 8, np.random.default_rng(0))
        assert batches
        for batch in batches:
            assert len(batch) == 8
            assert len({p.image_id for p in batch}) == 8

    def test_partial_batch_dropped(self):
        pairs = [_pair(None, image_id=f"i{i}") for i in range(10)]
        batches = epoch_batches(pairs, 4, np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 4]

    def test_seeded_order(self, corpus):
        a = epoch_batches(corpus['text_image'], 8, np.random.default_rng(5))
        b = epoch_batches(corpus['text_image'], 8, np.random.default_rng(5))
        assert a == b

    def test_too_few_images(self):
        pairs = [_pair(None, image_id='same') for _ in range(10)]
        assert epoch_batches(pairs, 2, np.random.default_rng(0)) == []


# -------------------------------------------------------------------------------------------------
# Synthetic corpus
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestSyntheticCorpus:
    '''Test suite for gen_synthetic_corpus.'''

    def test_byte_identical_across_runs(self, tmp_path):
        config = SynthConfig(seed=3, pairs_per_class=50)
        first = gen_synthetic_corpus(config, tmp_path / 'a')
        second = gen_synthetic_corpus(config, tmp_path / 'b')
        for role in first:
            assert first[role].read_bytes() == second[role].read_bytes(), role

    def test_lexicon_requires_core_keys(self, tmp_path):
        path = tmp_path / 'lexicon.json'
        path.write_text(json.dumps({'concepts': {}}))
        with pytest.raises(DataFormatError, match='source_lang'):
            load_lexicon(path)

    def test_distinct_unit_embeddings(self, corpus):
        embeddings = {p.image_id: np.array(p.image_embedding) for p in corpus['text_image']}
        assert len(embeddings) == 10
        matrix = np.stack(list(embeddings.values()))
        np.testing.assert_allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-6)
        cos = matrix @ matrix.T
        np.fill_diagonal(cos, -1.0)
        assert cos.max() < 0.99

    def test_same_invariant(self, corpus):
        same = [p for p in corpus['parallel'] if p.provenance == Provenance.SAME]
        assert same
        assert all(p.src_text == p.tgt_text and p.src_lang == p.tgt_lang for p in same)

    def test_mt_is_word_by_word_translation(self, corpus):
        lexicon = corpus['lexicon']
        table = {}
        for kind in ('concepts', 'fillers'):
            for en_word, zh_word in zip(lexicon[kind]['en'], lexicon[kind]['zh']):
                table[en_word] = zh_word
        mt = [p for p in corpus['parallel'] if p.provenance == Provenance.MT]
        for pair in mt:
            assert pair.tgt_text == ' '.join(table[w] for w in pair.src_text.split())

    def test_ht_is_reordered_translation(self, corpus):
        lexicon = corpus['lexicon']
        table = dict(zip(lexicon['concepts']['en'] + lexicon['fillers']['en'],
                         lexicon['concepts']['zh'] + lexicon['fillers']['zh']))
        for pair in (p for p in corpus['parallel'] if p.provenance == Provenance.HT):
            assert sorted(pair.tgt_text.split()) == sorted(table[w] for w in pair.src_text.split())

    def test_every_caption_has_one_concept_word(self, corpus):
        lexicon = corpus['lexicon']
        for pair in corpus['text_image']:
            words = pair.caption.split()
            concepts = [w for w in words if w in lexicon['concepts'][pair.lang]]
            assert len(concepts) == 1
            assert lexicon['image_ids'][lexicon['concepts'][pair.lang].index(concepts[0])] == pair.image_id

    def test_vocabulary_reserved_first(self, corpus_dir):
        lines = (corpus_dir / 'vocab.txt').read_text(encoding='utf-8').splitlines()
        assert lines[:4] == ['[PAD]', '[CLS]', '[TOS]', '[UNK]']
        assert len(set(lines)) == len(lines)

    def test_manifest_lists_files(self, corpus_dir):
        manifest = json.loads((corpus_dir / 'manifest.json').read_text())
        assert {'parallel', 'text_image', 'classification'} <= set(manifest['files'])
        for name in manifest['files'].values():
            assert (corpus_dir / name).exists()

    def test_heldout_split_covers_every_image_per_language(self, corpus):
        for lang in ('en', 'zh'):
            ids = {p.image_id for p in corpus['retrieval'] if p.lang == lang}
            assert len(ids) == 10

    def test_multilingual_variant(self, tmp_path):
        paths = gen_synthetic_corpus(SynthConfig(langs=('en', 'zh', 'de'), pairs_per_class=20), tmp_path)
        pairs = load_parallel_pairs(paths['parallel'])
        targets = {p.tgt_lang for p in pairs if p.provenance == Provenance.MT}
        assert targets == {'zh', 'de'}

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            SynthConfig(concepts=0)
