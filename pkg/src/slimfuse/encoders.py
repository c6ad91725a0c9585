"""Sensor and text encoders feeding the fusion pipeline.

Both sensor encoders (image and RVP map) share one recipe: a stem that
downsamples x4, then four stages of conv-BN-ReLU blocks with kernels
3x3 / 1x1 / 3x3. Stage i emits base * 2^(i-1) channels at 1/2^(i+1) of the
input resolution, so the three downsampling stages (2..4) end in a
stride-2 block while stage 1 keeps the stem resolution.

The text encoder is a deliberately small trainable stand-in: embedding
table, learned positions, one self-attention block, plus one linear
projection per fused stage. A learned null token is prepended and always
unmasked, so attention over an empty (all-pad) prompt degenerates to the
null token rather than an empty key set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd
from .attention import _merge_heads, _split_heads, _swap_last
from .nd import functional as F
from .nd.tensor import Tensor

STEM_FACTOR = 4
MIN_MULTIPLE = 32  # stem x4 then three stride-2 stages

PAD_ID = 0
NULL_ID = 1
UNK_ID = 2
N_SPECIAL = 3


@dataclass(frozen=True)
class StageSpec:
    """Shape law for stage i: base*2^(i-1) channels at input/2^(i+1)."""

    index: int
    base_channels: int = 64

    def __post_init__(self):
        if self.index not in (1, 2, 3, 4):
            raise ValueError(f"stage index must be 1..4, got {self.index}")

    @property
    def channels(self) -> int:
        return self.base_channels * 2 ** (self.index - 1)

    def spatial(self, input_h: int, input_w: int) -> tuple[int, int]:
        s = 2 ** (self.index + 1)
        return input_h // s, input_w // s


class SensorEncoder(nd.Module):
    """Four-stage conv backbone honoring the stage shape law."""

    def __init__(self, in_channels: int, rng: np.random.Generator, base_channels: int = 64):
        super().__init__()
        self.base_channels = base_channels
        b = base_channels
        self.stem = [
            nd.ConvBnRelu(in_channels, max(b // 2, 1), 3, rng, stride=2),
            nd.ConvBnRelu(max(b // 2, 1), b, 3, rng, stride=2),
        ]
        self.stages = []
        prev = b
        for i in (1, 2, 3, 4):
            ch = StageSpec(i, b).channels
            last_stride = 1 if i == 1 else 2
            self.stages.append([
                nd.ConvBnRelu(prev, ch, 3, rng, stride=1),
                nd.ConvBnRelu(ch, ch, 1, rng, stride=1),
                nd.ConvBnRelu(ch, ch, 3, rng, stride=last_stride),
            ])
            prev = ch

    def forward(self, x) -> list[Tensor]:
        x = nd.as_tensor(x)
        h, w = x.shape[-2], x.shape[-1]
        if h % MIN_MULTIPLE or w % MIN_MULTIPLE:
            raise nd.ShapeError(
                f"encoder input {h}x{w} must be a multiple of {MIN_MULTIPLE} in each dim"
            )
        for block in self.stem:
            x = block(x)
        feats = []
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
            feats.append(x)
        return feats


@dataclass
class Vocabulary:
    """Newline-delimited word list; ids 0..2 are pad / null / unk."""

    words: list[str]
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {w: i + N_SPECIAL for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return N_SPECIAL + len(self.words)

    def encode_text(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK_ID) for tok in text.lower().split()]

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.words) + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path) as f:
            words = [line.strip() for line in f if line.strip()]
        return Vocabulary(words)


@dataclass
class TokenSeq:
    ids: np.ndarray   # (L,) int64, PAD_ID at unused tail positions
    mask: np.ndarray  # (L,) bool, True where a real token sits

    @staticmethod
    def from_ids(ids, max_len: int) -> "TokenSeq":
        ids = list(ids)[:max_len]  # over-length prompts truncate at max_len
        arr = np.full(max_len, PAD_ID, dtype=np.int64)
        arr[: len(ids)] = ids
        mask = np.zeros(max_len, dtype=bool)
        mask[: len(ids)] = True
        return TokenSeq(arr, mask)


class ToyTextEncoder(nd.Module):
    """Embedding + one masked self-attention block + per-stage projections."""

    def __init__(self, vocab_size: int, stage_channels: list[int],
                 rng: np.random.Generator, dim: int = 64, heads: int = 2,
                 max_len: int = 50, trainable: bool = True):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.max_len = max_len
        self.embed = nd.Embedding(vocab_size, dim, rng)
        self.pos = nd.Parameter(
            rng.normal(0, 0.02, (max_len + 1, dim)).astype(nd.default_dtype()))
        self.attn_q = nd.Linear(dim, dim, rng)
        self.attn_k = nd.Linear(dim, dim, rng)
        self.attn_v = nd.Linear(dim, dim, rng)
        self.attn_out = nd.Linear(dim, dim, rng)
        self.projections = [nd.Linear(dim, ch, rng) for ch in stage_channels]
        if not trainable:
            for p in self.parameters():
                p.trainable = False

    @property
    def out_len(self) -> int:
        return self.max_len + 1  # prepended null token

    def encode(self, seq: TokenSeq | list[TokenSeq]):
        """Returns (features (..., L+1, dim), mask (..., L+1))."""
        seqs = [seq] if isinstance(seq, TokenSeq) else list(seq)
        ids = np.stack([np.concatenate(([NULL_ID], s.ids)) for s in seqs])
        mask = np.stack([np.concatenate(([True], s.mask)) for s in seqs])
        x = self.embed(ids) + self.pos
        q = _split_heads(self.attn_q(x), self.heads)
        k = _split_heads(self.attn_k(x), self.heads)
        v = _split_heads(self.attn_v(x), self.heads)
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        logits = (q @ _swap_last(k)) * scale
        add = np.where(mask, 0.0, F.NEG_MASK_VALUE)[:, None, None, :]
        attn = F.softmax(logits + add, axis=-1)
        x = x + self.attn_out(_merge_heads(attn @ v))
        if isinstance(seq, TokenSeq):
            return nd.reshape(x, x.shape[1:]), mask[0]
        return x, mask

    def project(self, features, stage_slot: int):
        """Channel projection for one fused stage; token count is preserved."""
        return self.projections[stage_slot](features)
