'''
Unit tests for tokenization, the encoder roles, the bundle and checkpoints.
'''

import hashlib
import json
import struct
import zlib

import numpy as np
import pytest
from pydantic import ValidationError

from scripts.altalign import tensor as T
from scripts.altalign.common import DataFormatError
from scripts.altalign.encoders import (CLS_ID, PAD_ID, TOS_ID, UNK_ID, CheckpointFormatError, CheckpointVersionError,
                                       EncoderBundle, ImageProvider, Linear, OracleTeacher, TextEncoder,
                                       TextEncoderConfig, UnknownImageError, Vocab, build_bundle, load_checkpoint,
                                       random_teacher, save_checkpoint, tokenize)
from scripts.altalign.tensor import Tensor


def _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config, seed=0):
    provider = ImageProvider(4, {'i0': [1, 0, 0, 0], 'i1': [0, 1, 0, 0], 'i2': [0.5, 0.5, 0.5, 0.5]})
    teacher = TextEncoder(tiny_teacher_config, np.random.default_rng(100), requires_grad=False)
    return build_bundle(tiny_vocab, teacher, provider, tiny_student_config, seed=seed)


def _rerandomize(params, rng, std=0.5):
    for p in params:
        p.data = rng.normal(0.0, std, size=p.shape).astype(p.dtype)


# -------------------------------------------------------------------------------------------------
# Vocabulary and tokenization
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestTokenize:
    '''Test suite for tokenize.'''

    def test_empty_student(self, tiny_vocab):
        assert tokenize('', tiny_vocab, 4, 'student') == [CLS_ID, PAD_ID, PAD_ID, PAD_ID]

    def test_teacher_appends_tos(self, tiny_vocab):
        ids = tokenize('a dog', tiny_vocab, 6, 'teacher')
        assert ids == [tiny_vocab.id('a'), tiny_vocab.id('dog'), TOS_ID, PAD_ID, PAD_ID, PAD_ID]

    def test_truncation_keeps_pooled_token(self, tiny_vocab):
        text = ' '.join(['dog'] * 11)
        teacher = tokenize(text, tiny_vocab, 6, 'teacher')
        student = tokenize(text, tiny_vocab, 6, 'student')
        assert len(teacher) == 6 and teacher[-1] == TOS_ID
        assert len(student) == 6 and student[0] == CLS_ID

    def test_lowercase_and_unknown(self, tiny_vocab):
        assert tokenize('DOG zebra', tiny_vocab, 4, 'student') == [CLS_ID, tiny_vocab.id('dog'), UNK_ID, PAD_ID]

    def test_vocab_requires_reserved_prefix(self, tmp_path):
        path = tmp_path / 'vocab.txt'
        path.write_text('dog\n[PAD]\n[CLS]\n[TOS]\n[UNK]\n')
        with pytest.raises(DataFormatError, match='must start with'):
            Vocab.from_file(path)

    def test_vocab_ids_dense(self, corpus):
        vocab = corpus['vocab']
        assert sorted(vocab.index.values()) == list(range(len(vocab)))


@pytest.mark.unit
class TestTextEncoderConfig:
    '''Test suite for TextEncoderConfig validation.'''

    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError, match='divisible'):
            TextEncoderConfig(layers=1, model_dim=10, heads=4, ffn_dim=8, max_len=4, vocab_size=8, pooling='CLS')

    def test_max_len_at_least_two(self):
        with pytest.raises(ValidationError):
            TextEncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=8, max_len=1, vocab_size=8, pooling='CLS')


# -------------------------------------------------------------------------------------------------
# Encoders
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestTeacher:
    '''Test suite for encode_teacher.'''

    def test_deterministic(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        ids = bundle.teacher_ids(['a dog runs', 'cat', 'gou mao'])
        np.testing.assert_array_equal(bundle.encode_teacher(ids).data, bundle.encode_teacher(ids).data)

    def test_pool_positions_match_tos_index(self, tiny_vocab, tiny_teacher_config, rng):
        teacher = TextEncoder(tiny_teacher_config, rng, requires_grad=False)
        words = tiny_vocab.tokens[4:]
        texts = [' '.join(rng.choice(words, size=int(rng.integers(0, 8)))) for _ in range(30)]
        ids = np.array([tokenize(t, tiny_vocab, 6, 'teacher') for t in texts])
        expected = [list(row).index(TOS_ID) for row in ids]
        assert list(teacher.pool_positions(ids)) == expected

    def test_pooled_output_is_hidden_state_at_tos(self, tiny_vocab, tiny_teacher_config, rng):
        teacher = TextEncoder(tiny_teacher_config, rng, requires_grad=False)
        _rerandomize(teacher.parameters().values(), rng)
        single = np.array([[tiny_vocab.id('dog'), TOS_ID, PAD_ID, PAD_ID]])
        # causal attention: the state at TOS ignores every later position
        later = np.array([[tiny_vocab.id('dog'), TOS_ID, tiny_vocab.id('cat'), tiny_vocab.id('a')]])
        other = np.array([[tiny_vocab.id('cat'), TOS_ID, PAD_ID, PAD_ID]])
        with T.no_grad():
            out = teacher(single).data
            np.testing.assert_allclose(teacher(later).data, out, atol=1e-6)
            assert not np.allclose(teacher(other).data, out)

    def test_out_of_vocabulary_id(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        with pytest.raises(IndexError):
            bundle.encode_teacher(np.array([[len(tiny_vocab), TOS_ID]]))

    def test_oracle_teacher_outputs_image_embeddings(self, corpus):
        provider = ImageProvider.from_pairs(corpus['text_image'], 32)
        teacher = OracleTeacher.from_lexicon(corpus['vocab'], corpus['lexicon'], provider)
        for pair in corpus['text_image'][:40]:
            ids = np.array([tokenize(pair.caption, corpus['vocab'], 8, 'teacher')])
            np.testing.assert_allclose(teacher(ids).data[0], provider.lookup([pair.image_id]).data[0], atol=1e-7)


@pytest.mark.unit
class TestStudent:
    '''Test suite for encode_student.'''

    @pytest.mark.parametrize('n', [1, 3, 7])
    def test_output_shape(self, tiny_vocab, tiny_teacher_config, tiny_student_config, n):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        out = bundle.encode_student(bundle.student_ids(['a dog'] * n))
        assert out.shape == (n, bundle.joint_dim)

    def test_appending_pad_leaves_output_unchanged(self, corpus, oracle_bundle):
        texts = [p.caption for p in corpus['text_image'][:16]]
        padded = oracle_bundle.student_ids(texts)
        lengths = (padded != PAD_ID).sum(axis=1)
        assert (lengths < padded.shape[1]).any()
        with T.no_grad():
            full = oracle_bundle.encode_student(padded).data
            for row, length in enumerate(lengths):
                trimmed = oracle_bundle.encode_student(padded[row:row + 1, :length]).data
                assert np.abs(full[row] - trimmed[0]).max() < 1e-6

    def test_batch_permutation_equivariance(self, tiny_vocab, tiny_teacher_config, tiny_student_config, rng):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        ids = bundle.student_ids(['a dog', 'cat runs', 'gou', 'mao mao a', 'dog cat'])
        perm = rng.permutation(5)
        with T.no_grad():
            np.testing.assert_allclose(bundle.encode_student(ids[perm]).data,
                                       bundle.encode_student(ids).data[perm], atol=1e-6)
            np.testing.assert_allclose(bundle.encode_teacher(ids[perm]).data,
                                       bundle.encode_teacher(ids).data[perm], atol=1e-6)

    def test_gradients_reach_student_not_teacher(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        target = bundle.encode_teacher(bundle.teacher_ids(['a dog', 'cat']))
        loss = T.mse(bundle.encode_student(bundle.student_ids(['a dog', 'cat'])), target)
        T.backward(loss)
        assert all(p.grad is not None for p in bundle.trainable_parameters().values()
                   if not p.name.endswith('pos_emb'))
        assert all(p.grad is None for p in bundle.frozen_parameters().values())

    def test_projection_gradient_matches_finite_differences(self, tiny_vocab, tiny_teacher_config,
                                                            tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        ids = bundle.student_ids(['a dog', 'cat runs', 'mao'])
        target = Tensor(np.random.default_rng(4).standard_normal((3, 4)))
        error = T.gradcheck(lambda: T.mse(bundle.encode_student(ids), target), [bundle.projection.weight])
        assert error < 1e-3


def _composed_case(tiny_vocab, seed):
    config = TextEncoderConfig(layers=2, model_dim=8, heads=2, ffn_dim=16, max_len=6,
                               vocab_size=len(tiny_vocab), pooling='CLS')
    rng = np.random.default_rng(seed)
    student = TextEncoder(config, rng)
    projection = Linear(8, 4, rng)
    _rerandomize(list(student.parameters().values()) + [projection.weight], rng)
    ids = np.array([tokenize(t, tiny_vocab, 6, 'student') for t in ('a dog runs', 'cat', 'gou mao a dog')])
    target = Tensor(rng.standard_normal((3, 4)))
    p = student.parameters()
    inputs = [projection.weight, p['layers.0.attn.wq'], p['layers.1.ffn.w1'], p['tok_emb'], p['layers.0.ln1.gamma']]
    return (lambda: T.mse(projection(student(ids)), target)), inputs


@pytest.mark.unit
class TestComposedGradcheck:
    '''The full student forward pass against central differences, 20 seeds.'''

    def test_float32(self, tiny_vocab):
        for seed in range(20):
            fn, inputs = _composed_case(tiny_vocab, seed)
            assert T.gradcheck(fn, inputs) < 1e-3, f"seed {seed}"

    def test_float64(self, tiny_vocab):
        for seed in range(20):
            with T.float64_mode():
                fn, inputs = _composed_case(tiny_vocab, seed)
                assert T.gradcheck(fn, inputs) < 1e-5, f"seed {seed}"


# -------------------------------------------------------------------------------------------------
# Image provider and bundle
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestImageProvider:
    '''Test suite for image_embed.'''

    def test_known_ids_in_order(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        out = bundle.image_embed(['i2', 'i0'])
        np.testing.assert_array_equal(out.data, np.array([[0.5] * 4, [1, 0, 0, 0]], dtype=np.float32))
        assert not out.requires_grad

    def test_unknown_id(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        with pytest.raises(UnknownImageError, match='nope'):
            bundle.image_embed(['i0', 'nope'])

    def test_conflicting_registration(self):
        provider = ImageProvider(2, {'a': [1, 0]})
        provider.register({'a': [1, 0]})
        with pytest.raises(DataFormatError, match='two different'):
            provider.register({'a': [0, 1]})


@pytest.mark.unit
class TestBundle:
    '''Test suite for EncoderBundle invariants.'''

    def test_projection_must_reach_joint_dim(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        with pytest.raises(ValueError, match='projection output'):
            EncoderBundle(tiny_vocab, bundle.teacher, bundle.student, Linear(8, 5), bundle.image_provider)

    def test_frozen_components_never_require_grad(self, tiny_vocab, tiny_student_config):
        teacher_config = TextEncoderConfig(layers=1, model_dim=4, heads=2, ffn_dim=8, max_len=6,
                                           vocab_size=len(tiny_vocab), pooling='TOS', causal=True)
        teacher = TextEncoder(teacher_config, requires_grad=True)
        bundle = build_bundle(tiny_vocab, teacher, ImageProvider(4, {'x': [1, 2, 3, 4]}), tiny_student_config)
        assert not any(p.requires_grad for p in bundle.frozen_parameters().values())

    def test_embed_texts_records_no_graph(self, tiny_vocab, tiny_teacher_config, tiny_student_config):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        out = bundle.embed_texts(['a dog', 'cat'])
        assert isinstance(out, np.ndarray) and out.shape == (2, 4)

    def test_random_teacher_is_seeded(self, tiny_vocab):
        a, b = random_teacher(tiny_vocab, seed=3), random_teacher(tiny_vocab, seed=3)
        for name, p in a.parameters().items():
            np.testing.assert_array_equal(p.data, b.parameters()[name].data)


# -------------------------------------------------------------------------------------------------
# Checkpoints
# -------------------------------------------------------------------------------------------------


def _rewrite_header(raw: bytes, edit) -> bytes:
    '''Apply `edit` to the JSON header and recompute both checksums.'''
    magic, version, header_len, _ = struct.unpack_from('<8sIII', raw)
    header = json.loads(raw[20:20 + header_len])
    edit(header)
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    body = struct.pack('<8sIII', magic, version, len(header_bytes), zlib.crc32(header_bytes)) + header_bytes \
        + raw[20 + header_len:-32]
    return body + hashlib.sha256(body).digest()


@pytest.mark.unit
class TestCheckpoint:
    '''Test suite for save_checkpoint / load_checkpoint.'''

    @pytest.fixture
    def saved(self, tiny_vocab, tiny_teacher_config, tiny_student_config, tmp_path):
        bundle = _tiny_bundle(tiny_vocab, tiny_teacher_config, tiny_student_config)
        bundle.logit_scale = Tensor(2.5, requires_grad=True, name='logit_scale')
        path = tmp_path / 'b.ckpt'
        save_checkpoint(bundle, path)
        return bundle, path

    def test_round_trip_bit_exact(self, saved):
        bundle, path = saved
        loaded = load_checkpoint(path)
        original, restored = bundle.state_dict(), loaded.state_dict()
        assert list(original) == list(restored)
        for name in original:
            np.testing.assert_array_equal(original[name].data, restored[name].data)
        assert loaded.student.config == bundle.student.config
        assert loaded.teacher.config == bundle.teacher.config
        assert loaded.vocab == bundle.vocab
        assert loaded.image_provider.ids == bundle.image_provider.ids
        assert loaded.frozen_digest() == bundle.frozen_digest()

    def test_save_load_save_identical(self, saved, tmp_path):
        _, path = saved
        save_checkpoint(load_checkpoint(path), tmp_path / 'again.ckpt')
        assert (tmp_path / 'again.ckpt').read_bytes() == path.read_bytes()

    def test_oracle_teacher_round_trip(self, oracle_bundle, tmp_path):
        save_checkpoint(oracle_bundle, tmp_path / 'o.ckpt')
        loaded = load_checkpoint(tmp_path / 'o.ckpt')
        assert isinstance(loaded.teacher, OracleTeacher)
        np.testing.assert_array_equal(loaded.teacher.table.data, oracle_bundle.teacher.table.data)
        assert loaded.logit_scale is None

    def test_corrupt_header_byte(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[25] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match='header checksum'):
            load_checkpoint(path)

    def test_corrupt_payload_byte(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match='checksum'):
            load_checkpoint(path)

    def test_truncated(self, saved):
        _, path = saved
        path.write_bytes(path.read_bytes()[:-200])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack('<I', 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_shape_mismatch_vs_header(self, saved):
        _, path = saved

        def widen_student(header):
            header['student']['max_len'] = 5

        path.write_bytes(_rewrite_header(path.read_bytes(), widen_student))
        with pytest.raises(CheckpointFormatError, match='pos_emb'):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / 'x.ckpt'
        path.write_bytes(b'\x00' * 200)
        with pytest.raises(CheckpointFormatError, match='not an altalign checkpoint'):
            load_checkpoint(path)
