from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from speechqa.dpr.base import ConfigError, DimensionError, EmptyInputError, LengthError, Module, SequenceTooShortError
from speechqa.dpr.numerics import (
    Parameter,
    Tensor,
    columns,
    concat,
    conv1d,
    conv_output_length,
    gather_rows,
    gelu,
    instance_norm,
    layer_norm,
    matmul,
    row,
    rows,
    scale,
    softmax,
    stack,
)
from speechqa.dpr.util import make_rng, read_frame_file, write_frame_file


class InputKind(Enum):
    """
    What a retriever consumes.
    """

    FRAMES = "frames"
    """Frame features of the speech signal. This is the end-to-end student."""
    TOKENS = "tokens"
    """Token ids of a (channel-corrupted) transcript. This is the cascading teacher or the cascading student."""


@dataclass
class FrameSequence:
    """
    The "speech" of one utterance: ``T`` frames of ``D`` features each.
    """

    utterance_id: str
    frames: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frames.shape[1])


@dataclass
class EncoderConfig:
    """
    Sizes of one bi-encoder. The defaults are the desk-scale ones; the published model uses a 12-layer, 768-dimensional
    encoder.
    """

    model_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    max_positions: int = 256
    hidden_channels: int = 32
    kernel_sizes: Tuple[int, int] = (4, 3)
    strides: Tuple[int, int] = (4, 3)
    norm_eps: float = 1e-5
    use_positions: bool = True
    token_embedding_dim: int = 0
    """Width of the token embedding table. 0 means ``model_dim``, in which case no input projection is needed."""

    def validate(self) -> None:
        if self.model_dim < 1 or self.num_layers < 0 or self.max_positions < 2:
            raise ConfigError(f"Invalid encoder sizes: {self}")
        if self.num_heads < 1 or self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if len(self.kernel_sizes) != 2 or len(self.strides) != 2:
            raise ConfigError("The feature processor has exactly two convolution layers")
        if min(self.kernel_sizes) < 1 or min(self.strides) < 1:
            raise ConfigError(f"Kernel sizes and strides must be positive, got {self.kernel_sizes}, {self.strides}")


def _normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Parameter.create(f"{name}.weight", _normal(rng, (in_dim, out_dim), 1.0 / np.sqrt(in_dim)))
        self.bias = Parameter.create(f"{name}.bias", np.zeros(out_dim))

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight.tensor) + self.bias.tensor


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, eps: float):
        self.gain = Parameter.create(f"{name}.gain", np.ones(dim))
        self.bias = Parameter.create(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield self.gain.name, self.gain
        yield self.bias.name, self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


class AttentionBlock(Module):
    """
    A pre-norm transformer block: multi-head self-attention and a position-wise feed-forward network, each wrapped in a
    residual connection.

    The attention weights of the most recent call are kept in :attr:`last_attention` (one ``T×T`` array per head).
    """

    def __init__(self, name: str, dim: int, num_heads: int, ffn_dim: int, eps: float, rng: np.random.Generator):
        if num_heads < 1 or dim % num_heads != 0:
            raise ConfigError(f"Dimension {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.norm1 = LayerNorm(f"{name}.norm1", dim, eps)
        self.query = Linear(f"{name}.query", dim, dim, rng)
        self.key = Linear(f"{name}.key", dim, dim, rng)
        self.value = Linear(f"{name}.value", dim, dim, rng)
        self.output = Linear(f"{name}.output", dim, dim, rng)
        self.norm2 = LayerNorm(f"{name}.norm2", dim, eps)
        self.ffn_in = Linear(f"{name}.ffn_in", dim, ffn_dim, rng)
        self.ffn_out = Linear(f"{name}.ffn_out", ffn_dim, dim, rng)
        self.last_attention: List[np.ndarray] = []

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for child in (self.norm1, self.query, self.key, self.value, self.output, self.norm2, self.ffn_in, self.ffn_out):
            yield from child.named_parameters()

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"Attention block of width {self.dim} got input of shape {x.shape}")
        head_dim = self.dim // self.num_heads

        h = self.norm1(x)
        q, k, v = self.query(h), self.key(h), self.value(h)
        heads = []
        self.last_attention = []
        for i in range(self.num_heads):
            start, stop = i * head_dim, (i + 1) * head_dim
            scores = scale(matmul(columns(q, start, stop), columns(k, start, stop).T), 1.0 / np.sqrt(head_dim))
            weights = softmax(scores)
            self.last_attention.append(weights.data.copy())
            heads.append(matmul(weights, columns(v, start, stop)))
        x = x + self.output(concat(heads, axis=1))

        return x + self.ffn_out(gelu(self.ffn_in(self.norm2(x))))


class SentenceEncoder(Module):
    """
    Turns a sequence of vectors into one sentence vector, read off the output at a prepended [CLS] position.

    :param input_dim: Width of the incoming sequence. If it differs from ``cfg.model_dim``, a learned linear projection
                      is applied before the [CLS] vector is prepended.
    """

    def __init__(self, name: str, input_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.input_dim = input_dim
        self.output_dim = cfg.model_dim
        self.projection = (
            Linear(f"{name}.projection", input_dim, cfg.model_dim, rng) if input_dim != cfg.model_dim else None
        )
        self.cls_embedding = Parameter.create(f"{name}.cls", _normal(rng, (cfg.model_dim,), 0.1))
        self.position_embeddings = Parameter.create(
            f"{name}.positions", _normal(rng, (cfg.max_positions, cfg.model_dim), 0.1)
        )
        self.layers = [
            AttentionBlock(f"{name}.layers.{i}", cfg.model_dim, cfg.num_heads, cfg.ffn_dim, cfg.norm_eps, rng)
            for i in range(cfg.num_layers)
        ]

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        if self.projection is not None:
            yield from self.projection.named_parameters()
        yield self.cls_embedding.name, self.cls_embedding
        yield self.position_embeddings.name, self.position_embeddings
        for layer in self.layers:
            yield from layer.named_parameters()

    def __call__(self, seq: Tensor) -> Tensor:
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise DimensionError(f"Sentence encoder needs a non-empty T×D sequence, got shape {seq.shape}")
        if seq.shape[1] != self.input_dim:
            raise DimensionError(f"Sentence encoder expects width {self.input_dim}, got {seq.shape[1]}")
        length = seq.shape[0] + 1
        if length > self.cfg.max_positions:
            raise LengthError(f"Sequence of {length} positions (with [CLS]) exceeds {self.cfg.max_positions}")

        if self.projection is not None:
            seq = self.projection(seq)
        x = concat([stack([self.cls_embedding.tensor]), seq], axis=0)
        if self.cfg.use_positions:
            x = x + rows(self.position_embeddings.tensor, 0, length)
        for layer in self.layers:
            x = layer(x)
        return row(x, 0)


class FeatureProcessor(Module):
    """
    Instance normalization followed by two strided convolutions (each followed by GELU), shortening the frame sequence
    by roughly the product of the strides.
    """

    def __init__(self, name: str, feature_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.feature_dim = feature_dim
        self.kernel_sizes = tuple(cfg.kernel_sizes)
        self.strides = tuple(cfg.strides)
        self.eps = cfg.norm_eps
        k1, k2 = self.kernel_sizes
        h = cfg.hidden_channels
        self.conv1 = Parameter.create(
            f"{name}.conv1", _normal(rng, (k1, feature_dim, h), 1.0 / np.sqrt(k1 * feature_dim))
        )
        self.bias1 = Parameter.create(f"{name}.bias1", np.zeros(h))
        self.conv2 = Parameter.create(f"{name}.conv2", _normal(rng, (k2, h, h), 1.0 / np.sqrt(k2 * h)))
        self.bias2 = Parameter.create(f"{name}.bias2", np.zeros(h))

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for p in (self.conv1, self.bias1, self.conv2, self.bias2):
            yield p.name, p

    @property
    def min_frames(self) -> int:
        """The shortest input that still yields one output position."""
        (k1, k2), (s1, _) = self.kernel_sizes, self.strides
        return k1 + (k2 - 1) * s1

    def output_length(self, num_frames: int) -> int:
        (k1, k2), (s1, s2) = self.kernel_sizes, self.strides
        return conv_output_length(conv_output_length(num_frames, k1, s1), k2, s2)

    def __call__(self, frames: Tensor, utterance_id: str | None = None) -> Tensor:
        if frames.ndim != 2 or frames.shape[1] != self.feature_dim:
            raise DimensionError(f"Expected T×{self.feature_dim} frames, got shape {frames.shape}")
        if frames.shape[0] < self.min_frames:
            raise SequenceTooShortError(
                f"{frames.shape[0]} frames is shorter than the {self.min_frames} the convolutions need", utterance_id
            )
        x = instance_norm(frames, self.eps)
        x = gelu(conv1d(x, self.conv1.tensor, self.strides[0]) + self.bias1.tensor)
        return gelu(conv1d(x, self.conv2.tensor, self.strides[1]) + self.bias2.tensor)


class TokenEmbedder(Module):
    """
    An embedding table. Token ids outside ``[0, vocab_size)`` are mapped to ``unk_id``.
    """

    def __init__(self, name: str, vocab_size: int, dim: int, rng: np.random.Generator, unk_id: int = 0):
        if vocab_size < 1 or not 0 <= unk_id < vocab_size:
            raise ConfigError(f"Invalid vocabulary: size {vocab_size}, unk id {unk_id}")
        self.vocab_size = vocab_size
        self.unk_id = unk_id
        self.table = Parameter.create(f"{name}.table", _normal(rng, (vocab_size, dim), 1.0))

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield self.table.name, self.table

    def ids(self, tokens: Sequence[int]) -> List[int]:
        return [t if 0 <= t < self.vocab_size else self.unk_id for t in tokens]

    def __call__(self, tokens: Sequence[int]) -> Tensor:
        return gather_rows(self.table.tensor, self.ids(tokens))


def process_features(frames: FrameSequence, processor: FeatureProcessor) -> Tensor:
    """
    Run the feature processor over one utterance.

    :param frames: The frames of the utterance.
    :param processor: The feature processor.
    :return: A ``T'×H`` tensor.
    """
    return processor(Tensor(frames.frames), frames.utterance_id)


def encode_sentence(seq: Tensor, enc: SentenceEncoder) -> Tensor:
    return enc(seq)


def encode_tokens(tokens: Sequence[int], emb: TokenEmbedder, enc: SentenceEncoder) -> Tensor:
    """
    Embed a token sequence and encode it into a sentence vector.

    :param tokens: The token ids. Unknown ids are mapped to the unk token.
    :return: A vector of length ``enc.output_dim``.
    """
    if len(tokens) == 0:
        raise EmptyInputError("Cannot encode an empty token sequence")
    return enc(emb(tokens))


class FrameSentenceEncoder(Module):
    """One side (question or passage) of the end-to-end student."""

    def __init__(self, name: str, feature_dim: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.processor = FeatureProcessor(f"{name}.processor", feature_dim, cfg, rng)
        self.encoder = SentenceEncoder(f"{name}.encoder", cfg.hidden_channels, cfg, rng)

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield from self.processor.named_parameters()
        yield from self.encoder.named_parameters()

    def __call__(self, frames: FrameSequence) -> Tensor:
        return encode_sentence(process_features(frames, self.processor), self.encoder)


class TokenSentenceEncoder(Module):
    """One side (question or passage) of a text dense retriever."""

    def __init__(self, name: str, vocab_size: int, cfg: EncoderConfig, rng: np.random.Generator, unk_id: int = 0):
        dim = cfg.token_embedding_dim or cfg.model_dim
        self.embedder = TokenEmbedder(f"{name}.embedder", vocab_size, dim, rng, unk_id)
        self.encoder = SentenceEncoder(f"{name}.encoder", dim, cfg, rng)

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield from self.embedder.named_parameters()
        yield from self.encoder.named_parameters()

    def __call__(self, tokens: Sequence[int]) -> Tensor:
        return encode_tokens(tokens, self.embedder, self.encoder)


@dataclass
class RetrieverModel(Module):
    """
    A bi-encoder: a question encoder ``Q(.)`` and a passage encoder ``P(.)`` sharing no parameters.

    The same type serves the cascading teacher (token input), the end-to-end student (frame input) and the cascading
    student (token input, distilled from the teacher).
    """

    question_encoder: FrameSentenceEncoder | TokenSentenceEncoder
    passage_encoder: FrameSentenceEncoder | TokenSentenceEncoder
    input_kind: InputKind
    config: EncoderConfig = field(default_factory=EncoderConfig)
    vocab_size: int = 0
    feature_dim: int = 0

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        yield from self.question_encoder.named_parameters()
        yield from self.passage_encoder.named_parameters()

    def encode_question(self, item: FrameSequence | Sequence[int]) -> Tensor:
        return self.question_encoder(item)  # type: ignore[arg-type]

    def encode_passage(self, item: FrameSequence | Sequence[int]) -> Tensor:
        return self.passage_encoder(item)  # type: ignore[arg-type]

    @property
    def output_dim(self) -> int:
        return self.config.model_dim


def build_retriever(
    input_kind: InputKind,
    cfg: EncoderConfig,
    seed: int | np.random.Generator,
    vocab_size: int = 0,
    feature_dim: int = 0,
    unk_id: int = 0,
) -> RetrieverModel:
    """
    Create a freshly initialized bi-encoder.

    :param input_kind: Whether the encoders read frames or tokens.
    :param cfg: The encoder sizes.
    :param seed: The initialization seed, or a generator to draw from.
    :param vocab_size: Required for token input.
    :param feature_dim: Required for frame input.
    :return: A new :class:`RetrieverModel`.
    """
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, "init", input_kind.value)
    match input_kind:
        case InputKind.FRAMES:
            if feature_dim < 1:
                raise ConfigError("A frame-input retriever needs feature_dim >= 1")
            q: FrameSentenceEncoder | TokenSentenceEncoder = FrameSentenceEncoder("question", feature_dim, cfg, rng)
            p: FrameSentenceEncoder | TokenSentenceEncoder = FrameSentenceEncoder("passage", feature_dim, cfg, rng)
        case InputKind.TOKENS:
            if vocab_size < 2:
                raise ConfigError("A token-input retriever needs vocab_size >= 2")
            q = TokenSentenceEncoder("question", vocab_size, cfg, rng, unk_id)
            p = TokenSentenceEncoder("passage", vocab_size, cfg, rng, unk_id)
        case _:
            raise ConfigError(f"Unknown input kind {input_kind}")
    return RetrieverModel(
        question_encoder=q,
        passage_encoder=p,
        input_kind=input_kind,
        config=cfg,
        vocab_size=vocab_size,
        feature_dim=feature_dim,
    )


def save_frame_features(path: Path, frames: FrameSequence) -> None:
    write_frame_file(path, frames.frames)


def load_frame_features(path: Path, utterance_id: str | None = None) -> FrameSequence:
    """
    Load externally precomputed frame features (for example from a self-supervised speech model) from a binary matrix
    file, so they can replace the synthetic ones without code changes.

    :param path: The ``.mat`` file.
    :param utterance_id: The id to attach. Defaults to the file name without its suffix.
    """
    return FrameSequence(utterance_id=utterance_id or Path(path).stem, frames=read_frame_file(path))
