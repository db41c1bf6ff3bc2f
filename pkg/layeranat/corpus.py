# layeranat/corpus.py
import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .settings import stream_seed

logger = logging.getLogger(__name__)

TOKEN_PATTERN = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


def tokenize(text: str) -> list[str]:
    """Lowercases and splits into words, with punctuation as separate tokens."""
    return TOKEN_PATTERN.findall(text.lower())


class Vocabulary:
    """
    Word-level vocabulary.

    Corpus words take ids 0..n-1 in order of first occurrence; the special
    tokens follow. Out-of-vocabulary words encode to the unknown id.

    Attributes:
        id_to_token (list[str]): Token for each id.
        token_to_id (dict[str, int]): Inverse map.
    """

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        missing = [special for special in SPECIALS if special not in tokens]
        if missing:
            raise ValueError(f"vocabulary is missing special tokens {missing}")
        self.id_to_token = list(tokens)
        self.token_to_id = {token: index for index, token in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(word, unk) for word in tokenize(text)]

    def encode_sentence(self, text: str) -> list[int]:
        """<bos> words <eos>, the framing used for training and evaluation."""
        return [self.bos_id, *self.encode(text), self.eos_id]

    def unknown_words(self, text: str) -> list[str]:
        return [word for word in tokenize(text) if word not in self.token_to_id]

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        hidden = {self.pad_id, self.bos_id, self.eos_id} if skip_special else set()
        return " ".join(self.id_to_token[int(i)] for i in ids if int(i) not in hidden)


def build_vocab(corpus: str) -> Vocabulary:
    """
    Builds a word-level vocabulary with ids assigned by first occurrence.

    Args:
        corpus (str): Raw training text.

    Returns:
        Vocabulary: Corpus words followed by the special tokens.

    Raises:
        ValueError: If the corpus has no words.
    """
    words = tokenize(corpus)
    if not words:
        raise ValueError("build_vocab: empty corpus")
    ordered = list(dict.fromkeys(words))
    logger.info(f"Vocabulary built: {len(ordered)} words + {len(SPECIALS)} specials")
    return Vocabulary(ordered + list(SPECIALS))


def eval_hash(sentences: Sequence[str]) -> str:
    normalized = "\n".join(" ".join(tokenize(sentence)) for sentence in sentences)
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EvalSet:
    """
    Fixed held-out sentences, tokenized against a vocabulary.

    Attributes:
        sentences (tuple[str, ...]): Raw sentences.
        token_ids (tuple[tuple[int, ...], ...]): <bos> words <eos> per sentence.
        vocab_size (int): Size of the vocabulary the ids refer to.
        pad_id (int): Padding id used when sentences are batched.
        unknown_count (int): Words mapped to the unknown id.
        hash (str): SHA-256 over the normalized sentences.
    """

    sentences: tuple[str, ...]
    token_ids: tuple[tuple[int, ...], ...]
    vocab_size: int
    pad_id: int
    unknown_count: int
    hash: str

    @property
    def token_counts(self) -> tuple[int, ...]:
        return tuple(len(ids) - 2 for ids in self.token_ids)

    @classmethod
    def from_sentences(cls, sentences: Sequence[str], vocab: Vocabulary) -> "EvalSet":
        sentences = tuple(s.strip() for s in sentences if s.strip())
        if not sentences:
            raise ValueError("eval set is empty")
        unknown = sum(len(vocab.unknown_words(s)) for s in sentences)
        if unknown:
            logger.warning(f"Eval set has {unknown} out-of-vocabulary words")
        return cls(
            sentences=sentences,
            token_ids=tuple(tuple(vocab.encode_sentence(s)) for s in sentences),
            vocab_size=len(vocab),
            pad_id=vocab.pad_id,
            unknown_count=unknown,
            hash=eval_hash(sentences),
        )


def read_lines(path: Path) -> list[str]:
    """Reads a UTF-8 file, one entry per line; blank lines and '#' comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"cannot read {path}: no such file")
    with path.open(encoding="utf-8") as handle:
        return [line.strip() for line in handle if line.strip() and not line.lstrip().startswith("#")]


def load_eval_set(path: Path, vocab: Vocabulary) -> EvalSet:
    eval_set = EvalSet.from_sentences(read_lines(path), vocab)
    logger.info(f"Loaded {len(eval_set.sentences)} eval sentences (hash {eval_set.hash[:12]})")
    return eval_set


def compose_corpus(lines: Sequence[str], passes: int) -> list[str]:
    """
    Repeats the corpus lines in file order, once per pass.

    Every pass has the same sentence order, so a held-out block is
    predictable from the sentences before it.
    """
    if not lines:
        raise ValueError("compose_corpus: no corpus lines")
    if passes < 1:
        raise ValueError(f"compose_corpus: passes must be positive, got {passes}")
    return list(lines) * passes


def encode_corpus(lines: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    ids: list[int] = []
    for line in lines:
        ids.extend(vocab.encode_sentence(line))
    return np.asarray(ids, dtype=np.int64)


def make_blocks(tokens: np.ndarray, block_size: int) -> np.ndarray:
    """
    Cuts a token stream into non-overlapping windows of block_size + 1 tokens.

    Row i holds tokens[i*block : i*block + block + 1]; inputs are the first
    block_size entries and targets the last block_size.

    Raises:
        ValueError: If the stream is not longer than block_size.
    """
    tokens = np.asarray(tokens)
    if len(tokens) <= block_size:
        raise ValueError(
            f"corpus of {len(tokens)} tokens is shorter than block size {block_size} + 1"
        )
    count = (len(tokens) - 1) // block_size
    starts = np.arange(count) * block_size
    return np.stack([tokens[s : s + block_size + 1] for s in starts])


def steps_per_epoch(num_blocks: int, batch_size: int) -> int:
    return num_blocks // batch_size


def iterate_blocks(
    blocks: np.ndarray, batch_size: int, seed: int, epochs: Optional[int] = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """
    Yields (input, target) batches, reshuffling every epoch.

    The order of epoch e depends only on (seed, e), so two consumers with the
    same seed see the same batches. Incomplete trailing batches are dropped.
    """
    per_epoch = steps_per_epoch(len(blocks), batch_size)
    if per_epoch == 0:
        raise ValueError(f"{len(blocks)} blocks cannot fill a batch of {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([seed, epoch]).permutation(len(blocks))
        for step in range(per_epoch):
            rows = blocks[order[step * batch_size : (step + 1) * batch_size]]
            yield rows[:, :-1], rows[:, 1:]
        epoch += 1


def batchify(
    tokens: np.ndarray, block_size: int, batch_size: int, seed: int, epochs: Optional[int] = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Blocks a token stream and iterates it in seeded shuffled batches."""
    return iterate_blocks(make_blocks(tokens, block_size), batch_size, seed, epochs)


def split_blocks(blocks: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split by block; both halves keep their original relative order."""
    n_val = int(round(len(blocks) * val_fraction))
    if val_fraction > 0 and len(blocks) > 1:
        n_val = max(1, n_val)
    order = np.random.default_rng(seed).permutation(len(blocks))
    val_index = np.sort(order[:n_val])
    train_index = np.sort(order[n_val:])
    return blocks[train_index], blocks[val_index]


@dataclass
class TrainingData:
    """
    Training and validation blocks for one run.
    """

    vocab: Vocabulary
    train_blocks: np.ndarray
    val_blocks: np.ndarray
    batch_size: int
    seed: int

    @property
    def steps_per_epoch(self) -> int:
        return steps_per_epoch(len(self.train_blocks), self.batch_size)

    @property
    def block_size(self) -> int:
        return self.train_blocks.shape[1] - 1

    def batches(self, epochs: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iterate_blocks(self.train_blocks, self.batch_size, self.seed, epochs)

    def val_batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for start in range(0, len(self.val_blocks), self.batch_size):
            rows = self.val_blocks[start : start + self.batch_size]
            yield rows[:, :-1], rows[:, 1:]


def prepare_data(config) -> tuple[TrainingData, EvalSet]:
    """
    Loads the corpus and eval set named by a RunConfig.

    Args:
        config (RunConfig): Paths, block/batch sizes, split fraction and root seed.

    Returns:
        tuple[TrainingData, EvalSet]: Blocks split 90/10 (by default) and the
            eval set tokenized against the corpus vocabulary.
    """
    lines = read_lines(config.corpus_path)
    vocab = build_vocab("\n".join(lines))
    composed = compose_corpus(lines, config.corpus_passes)
    tokens = encode_corpus(composed, vocab)
    blocks = make_blocks(tokens, config.block_size)
    train, val = split_blocks(blocks, config.val_fraction, stream_seed(config.seed, "split"))
    data = TrainingData(
        vocab=vocab,
        train_blocks=train,
        val_blocks=val,
        batch_size=config.batch_size,
        seed=stream_seed(config.seed, "data"),
    )
    logger.info(
        f"Corpus: {len(tokens)} tokens, {len(train)} train / {len(val)} val blocks, "
        f"{data.steps_per_epoch} steps per epoch"
    )
    return data, load_eval_set(config.eval_path, vocab)
