"""
Tokenization and the three encoder roles.

- teacher: frozen text encoder whose pooled TOS output defines the joint space
- student: trainable text encoder pooled at CLS, followed by a linear projection
- image provider: frozen lookup of precomputed image embeddings

The bundle of all three serializes to a single binary checkpoint.
"""

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import tensor as T
from .common import DataFormatError, PathLike
from .tensor import Tensor

logger = logging.getLogger(__name__)

RESERVED_TOKENS = ('[PAD]', '[CLS]', '[TOS]', '[UNK]')
PAD_ID, CLS_ID, TOS_ID, UNK_ID = range(4)

MASK_VALUE = -1e9
INIT_STD = 0.02


class CheckpointFormatError(DataFormatError):
    """Checkpoint bytes are truncated, corrupted or inconsistent with their header."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint was written by an incompatible format version."""


class UnknownImageError(KeyError):
    """An image id is not present in the image provider."""

    def __init__(self, image_id: str):
        super().__init__(image_id)
        self.image_id = image_id

    def __str__(self):
        return f"unknown image id {self.image_id!r}"


class Vocab:
    """
    Shared multilingual vocabulary with dense ids.

    The first four ids are reserved for PAD, CLS, TOS and UNK.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with {', '.join(RESERVED_TOKENS)}")
        self.tokens = tokens
        self.index: Dict[str, int] = {}
        for i, token in enumerate(tokens):
            if token in self.index:
                raise ValueError(f"duplicate token {token!r} at id {i}")
            self.index[token] = i

    @classmethod
    def from_file(cls, path: PathLike) -> 'Vocab':
        """One token per line; the line number (from 0) is the id."""
        path = Path(path)
        if not path.exists():
            raise DataFormatError("file does not exist", path)
        with open(path, encoding='utf-8') as f:
            tokens = [line.rstrip('\n') for line in f]
        while tokens and tokens[-1] == '':
            tokens.pop()
        try:
            return cls(tokens)
        except ValueError as e:
            raise DataFormatError(str(e), path) from None

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)


def tokenize(text: str, vocab: Vocab, max_len: int, style: Literal['teacher', 'student']) -> List[int]:
    """
    Map text to a fixed-length id list.

    Teacher style keeps the first max_len-1 words and appends TOS; student
    style prepends CLS to the first max_len-1 words. Both pad with PAD.

    Args:
        text: Whitespace-separated words, matched lowercase
        vocab: Vocabulary (misses map to UNK)
        max_len: Output length, at least 2
        style: 'teacher' or 'student'

    Returns:
        List of exactly max_len ids
    """
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    words = [vocab.id(w) for w in text.lower().split()][:max_len - 1]
    if style == 'teacher':
        ids = words + [TOS_ID]
    elif style == 'student':
        ids = [CLS_ID] + words
    else:
        raise ValueError(f"unknown tokenization style {style!r}")
    return ids + [PAD_ID] * (max_len - len(ids))


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int,
                   style: Literal['teacher', 'student']) -> np.ndarray:
    return np.array([tokenize(t, vocab, max_len, style) for t in texts], dtype=np.int64).reshape(len(texts), max_len)


class TextEncoderConfig(BaseModel):
    """Shape of a transformer text encoder."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    layers: int = Field(ge=1)
    model_dim: int = Field(ge=1)
    heads: int = Field(ge=1)
    ffn_dim: int = Field(ge=1)
    max_len: int = Field(ge=2)
    vocab_size: int = Field(ge=len(RESERVED_TOKENS))
    pooling: Literal['TOS', 'CLS']
    causal: bool = False

    @model_validator(mode='after')
    def _check_heads(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        return self

    @property
    def style(self) -> str:
        return 'teacher' if self.pooling == 'TOS' else 'student'


JOINT_DIM = 32


def desk_teacher_config(vocab_size: int) -> TextEncoderConfig:
    return TextEncoderConfig(layers=2, model_dim=JOINT_DIM, heads=4, ffn_dim=64, max_len=8,
                             vocab_size=vocab_size, pooling='TOS', causal=True)


def desk_student_config(vocab_size: int) -> TextEncoderConfig:
    return TextEncoderConfig(layers=2, model_dim=48, heads=4, ffn_dim=96, max_len=8,
                             vocab_size=vocab_size, pooling='CLS', causal=False)


def _normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=shape)


class Linear:
    """y = x·W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 requires_grad: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_normal(rng, (in_dim, out_dim)), requires_grad=requires_grad, name='weight')
        self.bias = Tensor(np.zeros(out_dim), requires_grad=requires_grad, name='bias')

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> Dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}


class TextEncoder:
    """
    Pre-LayerNorm transformer returning one pooled vector per sequence.

    Attention always masks PAD keys. With `causal` set, each position also
    masks the positions after it.
    """

    def __init__(self, config: TextEncoderConfig, rng: Optional[np.random.Generator] = None,
                 requires_grad: bool = True):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        d, f = config.model_dim, config.ffn_dim
        shapes = {'tok_emb': (config.vocab_size, d), 'pos_emb': (config.max_len, d)}
        for i in range(config.layers):
            p = f"layers.{i}"
            shapes.update({
                f"{p}.ln1.gamma": (d,), f"{p}.ln1.beta": (d,),
                f"{p}.attn.wq": (d, d), f"{p}.attn.bq": (d,),
                f"{p}.attn.wk": (d, d), f"{p}.attn.bk": (d,),
                f"{p}.attn.wv": (d, d), f"{p}.attn.bv": (d,),
                f"{p}.attn.wo": (d, d), f"{p}.attn.bo": (d,),
                f"{p}.ln2.gamma": (d,), f"{p}.ln2.beta": (d,),
                f"{p}.ffn.w1": (d, f), f"{p}.ffn.b1": (f,),
                f"{p}.ffn.w2": (f, d), f"{p}.ffn.b2": (d,),
            })
        shapes.update({'ln_f.gamma': (d,), 'ln_f.beta': (d,)})

        self.params: Dict[str, Tensor] = {}
        for name, shape in shapes.items():
            leaf = name.rsplit('.', 1)[-1]
            if leaf == 'gamma':
                values = np.ones(shape)
            elif leaf == 'beta' or leaf.startswith('b'):
                values = np.zeros(shape)
            else:
                values = _normal(rng, shape)
            self.params[name] = Tensor(values, requires_grad=requires_grad, name=name)

    @property
    def out_dim(self) -> int:
        return self.config.model_dim

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def pool_positions(self, ids: np.ndarray) -> np.ndarray:
        """CLS pooling reads index 0; TOS pooling reads the first TOS (else the last non-PAD token)."""
        n = ids.shape[0]
        if self.config.pooling == 'CLS':
            return np.zeros(n, dtype=np.int64)
        is_tos = ids == TOS_ID
        last_real = np.maximum((ids != PAD_ID).sum(axis=1) - 1, 0)
        return np.where(is_tos.any(axis=1), is_tos.argmax(axis=1), last_real).astype(np.int64)

    def attention_mask(self, ids: np.ndarray) -> np.ndarray:
        """Additive mask of shape [n, 1, L, L]."""
        n, length = ids.shape
        mask = np.where(ids == PAD_ID, MASK_VALUE, 0.0)[:, None, None, :]
        mask = np.broadcast_to(mask, (n, 1, length, length))
        if self.config.causal:
            future = np.triu(np.full((length, length), MASK_VALUE), k=1)
            mask = mask + future[None, None]
        return np.ascontiguousarray(mask)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise T.ShapeError(f"expected an [n, L] id batch, got shape {ids.shape}")
        n, length = ids.shape
        if length > self.config.max_len:
            raise T.ShapeError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        cfg, p = self.config, self.params
        heads, dh = cfg.heads, cfg.model_dim // cfg.heads

        x = T.embedding(p['tok_emb'], ids) + T.embedding(p['pos_emb'], np.arange(length))
        mask = Tensor(self.attention_mask(ids))
        for i in range(cfg.layers):
            pre = f"layers.{i}"

            def split(t: Tensor) -> Tensor:
                return T.transpose(T.reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

            h = T.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
            q = split(h @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"])
            k = split(h @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"])
            v = split(h @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"])
            scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dh)) + mask
            context = T.softmax(scores) @ v
            merged = T.reshape(T.transpose(context, (0, 2, 1, 3)), (n, length, cfg.model_dim))
            x = x + (merged @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"])

            h = T.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
            hidden = T.gelu(h @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"])
            x = x + (hidden @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"])

        x = T.layer_norm(x, p['ln_f.gamma'], p['ln_f.beta'])
        return T.gather_positions(x, self.pool_positions(ids))


class OracleTeacher:
    """
    Frozen bag-of-embeddings teacher: the output is the sum of per-token rows.

    Built from a synthetic lexicon, every concept word's row is its image
    embedding and every other row is zero, so the teacher's space coincides
    with the image space.
    """

    def __init__(self, table: np.ndarray, max_len: int):
        self.table = Tensor(table, requires_grad=False, name='table')
        self.max_len = max_len

    @classmethod
    def from_lexicon(cls, vocab: Vocab, lexicon: Mapping, provider: 'ImageProvider',
                     max_len: int = 8) -> 'OracleTeacher':
        table = np.zeros((len(vocab), provider.dim))
        image_ids = lexicon['image_ids']
        rows = provider.lookup(image_ids).data
        for words in lexicon['concepts'].values():
            for concept, word in enumerate(words):
                if word not in vocab.index:
                    raise DataFormatError(f"lexicon word {word!r} is not in the vocabulary")
                table[vocab.index[word]] = rows[concept]
        return cls(table, max_len)

    @property
    def out_dim(self) -> int:
        return self.table.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        return {'table': self.table}

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and ids.max() >= self.table.shape[0]:
            raise IndexError(f"token id {int(ids.max())} outside vocabulary of size {self.table.shape[0]}")
        return Tensor(self.table.data[ids].sum(axis=1))


TeacherEncoder = Union[TextEncoder, OracleTeacher]


class ImageProvider:
    """Frozen map from image id to its precomputed embedding."""

    def __init__(self, dim: int, embeddings: Optional[Mapping[str, Sequence[float]]] = None):
        self.dim = dim
        self.ids: List[str] = []
        self._rows: Dict[str, int] = {}
        self.embeddings = Tensor(np.zeros((1, dim)), name='embeddings')
        self._matrix: Optional[np.ndarray] = None
        if embeddings:
            self.register(embeddings)

    def register(self, embeddings: Mapping[str, Sequence[float]]):
        """
        Add embeddings for new ids; an id already present must carry the same vector.

        Raises:
            DataFormatError: wrong length or conflicting vector for a known id
        """
        new_ids, new_rows = [], []
        for image_id, vector in embeddings.items():
            vector = np.asarray(vector, dtype=self.embeddings.dtype)
            if vector.shape != (self.dim,):
                raise DataFormatError(f"image {image_id!r} has embedding length {vector.shape}, expected {self.dim}")
            if image_id in self._rows:
                if not np.array_equal(self._matrix[self._rows[image_id]], vector):
                    raise DataFormatError(f"image {image_id!r} registered with two different embeddings")
                continue
            self._rows[image_id] = len(self.ids) + len(new_ids)
            new_ids.append(image_id)
            new_rows.append(vector)
        if not new_ids:
            return
        stacked = np.stack(new_rows)
        matrix = stacked if self._matrix is None else np.concatenate([self._matrix, stacked])
        self.ids.extend(new_ids)
        self._set_matrix(matrix)

    def _set_matrix(self, matrix: np.ndarray):
        self._matrix = matrix
        self.embeddings = Tensor(matrix, requires_grad=False, name='embeddings')

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id: str):
        return image_id in self._rows

    def lookup(self, image_ids: Sequence[str]) -> Tensor:
        """Stored vectors for `image_ids`, in order."""
        rows = []
        for image_id in image_ids:
            if image_id not in self._rows:
                raise UnknownImageError(image_id)
            rows.append(self._rows[image_id])
        return Tensor(self.embeddings.data[rows])

    def parameters(self) -> Dict[str, Tensor]:
        return {'embeddings': self.embeddings} if self.ids else {}

    @classmethod
    def from_pairs(cls, pairs: Iterable, dim: int) -> 'ImageProvider':
        provider = cls(dim)
        provider.register({p.image_id: p.image_embedding for p in pairs})
        return provider


@dataclass
class EncoderBundle:
    """Teacher, student, projection head, image provider and the saved contrastive temperature."""

    vocab: Vocab
    teacher: TeacherEncoder
    student: TextEncoder
    projection: Linear
    image_provider: ImageProvider
    logit_scale: Optional[Tensor] = None

    def __post_init__(self):
        if self.projection.in_dim != self.student.out_dim:
            raise ValueError(f"projection input {self.projection.in_dim} != student width {self.student.out_dim}")
        if self.projection.out_dim != self.teacher.out_dim:
            raise ValueError(f"projection output {self.projection.out_dim} != teacher output {self.teacher.out_dim}")
        if self.image_provider.dim != self.joint_dim:
            raise ValueError(f"image dimension {self.image_provider.dim} != joint dimension {self.joint_dim}")
        for tensor in self.frozen_parameters().values():
            tensor.requires_grad = False

    @property
    def joint_dim(self) -> int:
        return self.teacher.out_dim

    @property
    def teacher_max_len(self) -> int:
        if isinstance(self.teacher, OracleTeacher):
            return self.teacher.max_len
        return self.teacher.config.max_len

    def encode_teacher(self, ids) -> Tensor:
        with T.no_grad():
            return self.teacher(ids)

    def encode_student(self, ids) -> Tensor:
        return self.projection(self.student(ids))

    def image_embed(self, image_ids: Sequence[str]) -> Tensor:
        return self.image_provider.lookup(image_ids)

    def teacher_ids(self, texts: Sequence[str]) -> np.ndarray:
        return tokenize_batch(texts, self.vocab, self.teacher_max_len, 'teacher')

    def student_ids(self, texts: Sequence[str]) -> np.ndarray:
        return tokenize_batch(texts, self.vocab, self.student.config.max_len, 'student')

    def embed_texts(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        """Student embeddings for inference, without recording a graph."""
        chunks = []
        with T.no_grad():
            for start in range(0, len(texts), batch_size):
                chunks.append(self.encode_student(self.student_ids(texts[start:start + batch_size])).data)
        if not chunks:
            return np.zeros((0, self.joint_dim), dtype=T.get_default_dtype())
        return np.concatenate(chunks)

    def trainable_parameters(self) -> Dict[str, Tensor]:
        params = {f"student.{k}": v for k, v in self.student.parameters().items()}
        params.update({f"projection.{k}": v for k, v in self.projection.parameters().items()})
        return params

    def frozen_parameters(self) -> Dict[str, Tensor]:
        params = {f"teacher.{k}": v for k, v in self.teacher.parameters().items()}
        params.update({f"image_provider.{k}": v for k, v in self.image_provider.parameters().items()})
        return params

    def state_dict(self) -> Dict[str, Tensor]:
        state = self.frozen_parameters()
        state.update(self.trainable_parameters())
        if self.logit_scale is not None:
            state['logit_scale'] = self.logit_scale
        return state

    def frozen_digest(self) -> str:
        """SHA-256 over the frozen tensors and the image id list."""
        digest = hashlib.sha256()
        digest.update(json.dumps(self.image_provider.ids).encode('utf-8'))
        for name, tensor in sorted(self.frozen_parameters().items()):
            digest.update(name.encode('utf-8'))
            digest.update(str(tensor.shape).encode('utf-8'))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()


def build_bundle(vocab: Vocab, teacher: TeacherEncoder, provider: ImageProvider,
                 student_config: Optional[TextEncoderConfig] = None, seed: int = 0) -> EncoderBundle:
    """
    Assemble a fresh bundle with a seeded student and projection.

    Args:
        vocab: Shared vocabulary
        teacher: Frozen teacher encoder
        provider: Frozen image provider
        student_config: Defaults to the desk-scale student
        seed: Initialization seed for the student and projection

    Returns:
        EncoderBundle
    """
    student_config = student_config or desk_student_config(len(vocab))
    rng = np.random.default_rng(seed)
    student = TextEncoder(student_config, rng)
    projection = Linear(student_config.model_dim, teacher.out_dim, rng)
    return EncoderBundle(vocab, teacher, student, projection, provider)


def random_teacher(vocab: Vocab, seed: int = 0, config: Optional[TextEncoderConfig] = None) -> TextEncoder:
    """A seeded random transformer teacher standing in for a pretrained text tower."""
    config = config or desk_teacher_config(len(vocab))
    return TextEncoder(config, np.random.default_rng([seed, 1]), requires_grad=False)


# Checkpoints

CHECKPOINT_MAGIC = b'ALTALIGN'
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0
_PREFIX = struct.Struct('<8sIII')


def save_checkpoint(bundle: EncoderBundle, path: PathLike):
    """
    Serialize a bundle.

    Layout: magic, u32 version, u32 header length, u32 header CRC32, JSON
    header, u32 tensor count, then per tensor (u16 name length, name, u8 dtype,
    u8 ndim, u32 dims, little-endian f32 payload), then a SHA-256 of all
    preceding bytes.
    """
    if isinstance(bundle.teacher, OracleTeacher):
        teacher_header = {'kind': 'oracle', 'max_len': bundle.teacher.max_len,
                          'vocab_size': bundle.teacher.table.shape[0], 'out_dim': bundle.teacher.out_dim}
    else:
        teacher_header = {'kind': 'transformer', 'config': bundle.teacher.config.model_dump()}
    header = {
        'vocab': bundle.vocab.tokens,
        'teacher': teacher_header,
        'student': bundle.student.config.model_dump(),
        'joint_dim': bundle.joint_dim,
        'image_ids': bundle.image_provider.ids,
        'has_logit_scale': bundle.logit_scale is not None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')

    parts = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes), zlib.crc32(header_bytes)),
             header_bytes]
    state = bundle.state_dict()
    parts.append(struct.pack('<I', len(state)))
    for name, tensor in state.items():
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<BB', _DTYPE_F32, tensor.ndim))
        parts.append(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype='<f4').tobytes())
    body = b''.join(parts)
    with open(path, 'wb') as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())
    logger.info("Saved checkpoint %s (%d tensors, %d bytes)", path, len(state), len(body) + 32)


class _Reader:
    def __init__(self, data: bytes, path: PathLike):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError("truncated checkpoint", self.path)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: PathLike) -> EncoderBundle:
    """
    Read a bundle written by save_checkpoint.

    Raises:
        CheckpointVersionError: unsupported format version
        CheckpointFormatError: bad magic, truncation, checksum failure, or a
            tensor that does not match the shapes implied by the header
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError("file does not exist", path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointFormatError("truncated checkpoint", path)
    magic, version, header_len, header_crc = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not an altalign checkpoint", path)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {CHECKPOINT_VERSION}", path)
    body, trailer = raw[:-32], raw[-32:]
    reader = _Reader(body, path)
    reader.take(_PREFIX.size)
    header_bytes = reader.take(header_len)
    if zlib.crc32(header_bytes) != header_crc:
        raise CheckpointFormatError("header checksum mismatch", path)
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointFormatError("payload checksum mismatch", path)
    try:
        header = json.loads(header_bytes.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError("header is not valid JSON", path) from None

    tensors: Dict[str, np.ndarray] = {}
    (count,) = reader.unpack('<I')
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        dtype_code, ndim = reader.unpack('<BB')
        if dtype_code != _DTYPE_F32:
            raise CheckpointFormatError(f"tensor {name!r} has unknown dtype code {dtype_code}", path)
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(reader.take(size), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.offset != len(body):
        raise CheckpointFormatError("trailing bytes after tensor table", path)

    try:
        return _bundle_from(header, tensors, path)
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise CheckpointFormatError(f"inconsistent checkpoint: {e}", path) from None


def _bundle_from(header: Dict, tensors: Dict[str, np.ndarray], path: PathLike) -> EncoderBundle:
    vocab = Vocab(header['vocab'])
    joint_dim = int(header['joint_dim'])
    teacher_header = header['teacher']
    if teacher_header['kind'] == 'oracle':
        teacher = OracleTeacher(np.zeros((teacher_header['vocab_size'], teacher_header['out_dim'])),
                                teacher_header['max_len'])
    elif teacher_header['kind'] == 'transformer':
        teacher = TextEncoder(TextEncoderConfig(**teacher_header['config']), requires_grad=False)
    else:
        raise CheckpointFormatError(f"unknown teacher kind {teacher_header['kind']!r}", path)
    student = TextEncoder(TextEncoderConfig(**header['student']))
    projection = Linear(student.out_dim, joint_dim)
    provider = ImageProvider(joint_dim)
    image_ids = list(header['image_ids'])
    if image_ids:
        provider.register({i: np.zeros(joint_dim) for i in image_ids})
    logit_scale = Tensor(0.0, requires_grad=True, name='logit_scale') if header['has_logit_scale'] else None
    bundle = EncoderBundle(vocab, teacher, student, projection, provider, logit_scale)

    state = bundle.state_dict()
    if set(state) != set(tensors):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise CheckpointFormatError(f"tensor table does not match header (missing {missing}, unexpected {extra})", path)
    for name, target in state.items():
        values = tensors[name]
        if values.shape != target.shape:
            raise CheckpointFormatError(f"tensor {name!r} has shape {values.shape}, header implies {target.shape}", path)
        target.data = values
    if image_ids:
        provider._set_matrix(provider.embeddings.data)
    return bundle
