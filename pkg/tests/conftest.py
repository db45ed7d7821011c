'''
Shared fixtures for the altalign test suite.

The synthetic corpus and the two-stage pipeline are session-scoped: they are
built once and reused by every test that needs them.
'''

import numpy as np
import pytest

from scripts.altalign.data import (SynthConfig, gen_synthetic_corpus, load_lexicon, load_parallel_pairs,
                                   load_text_image_pairs)
from scripts.altalign.encoders import ImageProvider, OracleTeacher, TextEncoderConfig, Vocab, build_bundle
from scripts.altalign.training import StageConfig, run_stage

PIPELINE_SEED = 7


@pytest.fixture
def rng():
    '''Seeded generator for random test inputs.'''
    return np.random.default_rng(0)


@pytest.fixture(scope='session')
def corpus_dir(tmp_path_factory):
    '''Default synthetic corpus: seed 7, 10 concepts, en + zh, dim 32.'''
    out = tmp_path_factory.mktemp('corpus')
    gen_synthetic_corpus(SynthConfig(seed=PIPELINE_SEED), out)
    return out


@pytest.fixture(scope='session')
def corpus(corpus_dir):
    '''Loaded corpus files keyed by role.'''
    return {
        'vocab': Vocab.from_file(corpus_dir / 'vocab.txt'),
        'lexicon': load_lexicon(corpus_dir / 'lexicon.json'),
        'parallel': load_parallel_pairs(corpus_dir / 'parallel.jsonl'),
        'text_image': load_text_image_pairs(corpus_dir / 'text_image.jsonl'),
        'retrieval': load_text_image_pairs(corpus_dir / 'retrieval.jsonl'),
    }


def make_oracle_bundle(corpus, seed=PIPELINE_SEED):
    '''Fresh bundle with the lexicon oracle teacher and a seeded desk-scale student.'''
    provider = ImageProvider.from_pairs(corpus['text_image'], 32)
    teacher = OracleTeacher.from_lexicon(corpus['vocab'], corpus['lexicon'], provider)
    return build_bundle(corpus['vocab'], teacher, provider, seed=seed)


@pytest.fixture
def oracle_bundle(corpus):
    '''Untrained oracle-teacher bundle on the default corpus.'''
    return make_oracle_bundle(corpus)


@pytest.fixture(scope='session')
def pipeline(corpus, tmp_path_factory):
    '''Stage 1 (500 steps) then Stage 2 (200 steps) on the default corpus.'''
    out = tmp_path_factory.mktemp('pipeline')
    bundle = make_oracle_bundle(corpus)
    teacher_digest = bundle.frozen_digest()
    distill = run_stage('distill', StageConfig.desk_distill().model_copy(update={'seed': PIPELINE_SEED}),
                        bundle, out / 'stage1', parallel_pairs=corpus['parallel'])
    after_distill = bundle.frozen_digest()
    contrast = run_stage('contrast', StageConfig.desk_contrast().model_copy(update={'seed': PIPELINE_SEED}),
                         bundle, out / 'stage2', text_image_pairs=corpus['text_image'])
    return {
        'bundle': bundle,
        'distill': distill,
        'contrast': contrast,
        'digests': (teacher_digest, after_distill, bundle.frozen_digest()),
        'out': out,
    }


@pytest.fixture
def tiny_vocab():
    '''Reserved tokens plus a handful of words.'''
    return Vocab(['[PAD]', '[CLS]', '[TOS]', '[UNK]', 'a', 'dog', 'cat', 'runs', 'gou', 'mao'])


@pytest.fixture
def tiny_student_config(tiny_vocab):
    return TextEncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=16, max_len=6,
                             vocab_size=len(tiny_vocab), pooling='CLS')


@pytest.fixture
def tiny_teacher_config(tiny_vocab):
    return TextEncoderConfig(layers=1, model_dim=4, heads=2, ffn_dim=8, max_len=6,
                             vocab_size=len(tiny_vocab), pooling='TOS', causal=True)
