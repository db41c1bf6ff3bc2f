# tests/helpers.py
from typing import Optional, Sequence

import numpy as np

from layeranat.corpus import (
    EvalSet,
    TrainingData,
    build_vocab,
    compose_corpus,
    encode_corpus,
    make_blocks,
    split_blocks,
)
from layeranat.model import Model, build_model
from layeranat.schemas import LayerRole, LayerSpec, ModelSpec

SENTENCES = [
    "the cat sat on the mat .",
    "the dog ran in the park .",
    "a bird can fly over the park .",
    "fish swim in the sea .",
    "the sun is hot and the sea is cold .",
    "a cat and a dog sat in the sun .",
]


def tiny_vocab():
    return build_vocab("\n".join(SENTENCES))


def tiny_spec(
    vocab_size: int,
    num_layers: int = 3,
    model_dim: int = 8,
    head_count: int = 2,
    block_size: int = 16,
    multipliers: Optional[Sequence[int]] = None,
) -> ModelSpec:
    multipliers = multipliers or [1] * num_layers
    return ModelSpec(
        layers=tuple(
            LayerSpec(index=i, role=LayerRole.minor, ffn_multiplier=m) for i, m in enumerate(multipliers)
        ),
        model_dim=model_dim,
        head_count=head_count,
        vocab_size=vocab_size,
        block_size=block_size,
    )


def tiny_model(num_layers: int = 3, multipliers: Optional[Sequence[int]] = None, seed: int = 0, **kwargs):
    """A small model with its vocabulary and a three-sentence eval set."""
    vocab = tiny_vocab()
    spec = tiny_spec(len(vocab), num_layers=num_layers, multipliers=multipliers, **kwargs)
    model = build_model(spec, seed=seed, vocab=vocab)
    eval_set = EvalSet.from_sentences(SENTENCES[:3], vocab)
    return model, vocab, eval_set


def tiny_data(vocab, block_size: int = 8, batch_size: int = 2, seed: int = 0, passes: int = 4) -> TrainingData:
    tokens = encode_corpus(compose_corpus(SENTENCES, passes), vocab)
    train, val = split_blocks(make_blocks(tokens, block_size), 0.2, seed)
    return TrainingData(vocab=vocab, train_blocks=train, val_blocks=val, batch_size=batch_size, seed=seed)


def weights_snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: param.data.copy() for name, param in model.params.items()}
