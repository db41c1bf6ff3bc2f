# layeranat/model.py
import hashlib
import logging
import math
import time
from typing import Iterable, NamedTuple, Optional

import numpy as np

from . import tensor as T
from .cache import cache_key, ppl_cache
from .corpus import EvalSet, Vocabulary
from .schemas import LayerRole, LayerSpec, ModelSpec
from .tensor import ValueNode

logger = logging.getLogger(__name__)

# The id space reserves all seven projection names; this model's MLP is the
# two-matrix form, so gate_proj is never present.
COMPONENT_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
ATTENTION_COMPONENTS = ("q_proj", "k_proj", "v_proj", "o_proj")
MLP_COMPONENTS = ("up_proj", "down_proj")
ACTIVE_COMPONENTS = ATTENTION_COMPONENTS + MLP_COMPONENTS
NORM_PARAMS = ("ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta")
GLOBAL_PARAMS = ("tok_emb", "pos_emb", "ln_f.gamma", "ln_f.beta", "head")

INIT_STD = 0.02

GROWTH_ROLES = (
    LayerRole.redundant,
    LayerRole.critical,
    LayerRole.critical,
    LayerRole.redundant,
    LayerRole.critical,
    LayerRole.critical,
    LayerRole.redundant,
    LayerRole.minor,
    LayerRole.critical,
    LayerRole.critical,
    LayerRole.minor,
    LayerRole.redundant,
)
ROLE_MULTIPLIER = {LayerRole.critical: 4, LayerRole.minor: 2, LayerRole.redundant: 1}


class ComponentId(NamedTuple):
    """A weight matrix addressed by layer index and projection name."""

    layer: int
    name: str

    @property
    def key(self) -> str:
        return f"layers.{self.layer}.{self.name}"


def growth_layers() -> tuple[LayerSpec, ...]:
    """The twelve-layer heterogeneous stack: critical x4, minor x2, redundant x1."""
    return tuple(
        LayerSpec(index=i, role=role, ffn_multiplier=ROLE_MULTIPLIER[role])
        for i, role in enumerate(GROWTH_ROLES)
    )


def growth_spec(vocab_size: int, model_dim: int = 64, head_count: int = 4, block_size: int = 64) -> ModelSpec:
    return ModelSpec(
        layers=growth_layers(),
        model_dim=model_dim,
        head_count=head_count,
        vocab_size=vocab_size,
        block_size=block_size,
    )


def uniform_twin(spec: ModelSpec) -> ModelSpec:
    """
    The spec used by the uniform baseline.

    Both protocols train the identical heterogeneous architecture; "uniform"
    names the schedule, not the shape, so this is the identity.
    """
    return spec.model_copy()


def component_shape(spec: ModelSpec, cid: ComponentId) -> tuple[int, int]:
    d = spec.model_dim
    inner = spec.layers[cid.layer].ffn_multiplier * d
    if cid.name in ATTENTION_COMPONENTS:
        return (d, d)
    if cid.name == "up_proj":
        return (d, inner)
    return (inner, d)


def spec_param_count(spec: ModelSpec) -> int:
    """
    Closed-form parameter count.

    Token and position embeddings, per layer 4·d² attention + 2·m·d² MLP +
    two norms (4·d), the final norm (2·d) and the untied head (d·V).
    """
    d, v = spec.model_dim, spec.vocab_size
    layers = sum(4 * d * d + 2 * layer.ffn_multiplier * d * d + 4 * d for layer in spec.layers)
    return v * d + spec.block_size * d + layers + 2 * d + d * v


class Model:
    """
    Decoder-only transformer with per-layer FFN width.

    Parameters live in an ordered name -> ValueNode map; layer weights are
    named "layers.{i}.{component}" and per-layer norms "layers.{i}.ln1.gamma"
    etc. Arrays are used as x @ W, so up_proj is (d, m·d) and down_proj (m·d, d).

    Attributes:
        spec (ModelSpec): Architecture.
        params (dict[str, ValueNode]): All trainable tensors.
        seed (int): Initialization seed.
        vocab (Vocabulary, optional): Vocabulary the ids refer to.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, ValueNode], seed: int, vocab: Optional[Vocabulary] = None):
        self.spec = spec
        self.params = params
        self.seed = seed
        self.vocab = vocab
        self._version = 0
        self._fingerprint: Optional[tuple[int, str]] = None

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    @property
    def pad_id(self) -> Optional[int]:
        return self.vocab.pad_id if self.vocab is not None else None

    def touch(self):
        """Marks the weights as modified (drops the memoized fingerprint)."""
        self._version += 1
        self._fingerprint = None

    def layer_param_names(self, layer: int) -> list[str]:
        self._check_layer(layer)
        names = [f"layers.{layer}.{name}" for name in NORM_PARAMS]
        names += [ComponentId(layer, name).key for name in ACTIVE_COMPONENTS]
        return names

    def component_ids(self, layer: Optional[int] = None) -> list[ComponentId]:
        layers = range(self.num_layers) if layer is None else [layer]
        return [ComponentId(i, name) for i in layers for name in ACTIVE_COMPONENTS]

    def set_trainable(self, names: Optional[Iterable[str]]):
        """Only the named parameters receive gradients; None makes everything trainable."""
        allowed = None if names is None else set(names)
        for name, param in self.params.items():
            param.requires_grad = allowed is None or name in allowed
            param.zero_grad()

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def _check_layer(self, layer: int):
        if not 0 <= layer < self.num_layers:
            raise ValueError(f"layer {layer} out of range for a {self.num_layers}-layer model")

    def _block(self, x: ValueNode, layer: int) -> ValueNode:
        p = self.params
        prefix = f"layers.{layer}."
        batch, seq, d = x.shape
        heads = self.spec.head_count
        head_dim = d // heads

        def split_heads(t):
            return T.transpose(T.reshape(t, (batch, seq, heads, head_dim)), (0, 2, 1, 3))

        h = T.layer_norm(x, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"])
        q = split_heads(T.matmul(h, p[prefix + "q_proj"]))
        k = split_heads(T.matmul(h, p[prefix + "k_proj"]))
        v = split_heads(T.matmul(h, p[prefix + "v_proj"]))
        attn = T.softmax(T.causal_attention_scores(q, k))
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (batch, seq, d))
        x = T.add(x, T.matmul(ctx, p[prefix + "o_proj"]))

        h = T.layer_norm(x, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"])
        h = T.gelu(T.matmul(h, p[prefix + "up_proj"]))
        return T.add(x, T.matmul(h, p[prefix + "down_proj"]))

    def forward(self, ids: np.ndarray, active: Optional[set[int]] = None) -> ValueNode:
        """
        Computes next-token logits.

        Args:
            ids (np.ndarray): Token ids of shape (batch, seq), seq <= block_size.
            active (set[int], optional): Layers to run; the others are bypassed
                (identity on the residual stream). None runs every layer.

        Returns:
            ValueNode: Logits of shape (batch, seq, vocab).
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"forward: ids must be 2-D (batch, seq), got {ids.shape}")
        batch, seq = ids.shape
        if seq > self.spec.block_size:
            raise ValueError(f"forward: sequence of {seq} exceeds block size {self.spec.block_size}")
        positions = np.broadcast_to(np.arange(seq), (batch, seq))
        x = T.add(T.embedding(self.params["tok_emb"], ids), T.embedding(self.params["pos_emb"], positions))
        for layer in range(self.num_layers):
            if active is not None and layer not in active:
                continue
            x = self._block(x, layer)
        x = T.layer_norm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])
        return T.matmul(x, self.params["head"])

    def loss(self, inputs: np.ndarray, targets: np.ndarray, active: Optional[set[int]] = None) -> ValueNode:
        logits = self.forward(inputs, active)
        flat = T.reshape(logits, (-1, self.spec.vocab_size))
        return T.cross_entropy(flat, np.asarray(targets).reshape(-1), ignore_index=self.pad_id)


def build_model(spec: ModelSpec, seed: int, vocab: Optional[Vocabulary] = None) -> Model:
    """
    Builds a model with scaled-normal initialization.

    Matrices and embeddings are drawn from N(0, 0.02²); the residual output
    projections (o_proj, down_proj) are further scaled by 1/sqrt(2·num_layers).
    Norm gains start at one and shifts at zero.

    Args:
        spec (ModelSpec): Architecture.
        seed (int): Initialization seed; equal seeds give bit-identical weights.
        vocab (Vocabulary, optional): Attached vocabulary, sizes must agree.

    Returns:
        Model: The initialized model.

    Raises:
        ValueError: If model_dim is not divisible by head_count, a layer has
            the anti role, or the vocabulary size disagrees with the spec.
    """
    d = spec.model_dim
    if d % spec.head_count:
        raise ValueError(f"model_dim {d} is not divisible by head_count {spec.head_count}")
    anti = [layer.index for layer in spec.layers if layer.role == LayerRole.anti]
    if anti:
        raise ValueError(f"anti-layers are excluded from built models, got anti roles at {anti}")
    if vocab is not None and len(vocab) != spec.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} tokens does not match spec vocab_size {spec.vocab_size}")

    rng = np.random.default_rng(seed)
    out_std = INIT_STD / math.sqrt(2 * spec.num_layers)

    def normal(shape, std=INIT_STD):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    params: dict[str, ValueNode] = {
        "tok_emb": T.parameter(normal((spec.vocab_size, d)), "tok_emb"),
        "pos_emb": T.parameter(normal((spec.block_size, d)), "pos_emb"),
    }
    for layer in spec.layers:
        prefix = f"layers.{layer.index}."
        for norm in ("ln1", "ln2"):
            params[prefix + norm + ".gamma"] = T.parameter(np.ones(d, np.float32), prefix + norm + ".gamma")
            params[prefix + norm + ".beta"] = T.parameter(np.zeros(d, np.float32), prefix + norm + ".beta")
        for name in ACTIVE_COMPONENTS:
            cid = ComponentId(layer.index, name)
            std = out_std if name in ("o_proj", "down_proj") else INIT_STD
            params[cid.key] = T.parameter(normal(component_shape(spec, cid), std), cid.key)
    params["ln_f.gamma"] = T.parameter(np.ones(d, np.float32), "ln_f.gamma")
    params["ln_f.beta"] = T.parameter(np.zeros(d, np.float32), "ln_f.beta")
    params["head"] = T.parameter(normal((d, spec.vocab_size)), "head")

    model = Model(spec, params, seed, vocab)
    logger.info(f"Built {spec.num_layers}-layer model with {param_count(model)} parameters (seed {seed})")
    return model


def _component(model: Model, cid) -> ValueNode:
    cid = ComponentId(*cid)
    model._check_layer(cid.layer)
    if cid.name not in COMPONENT_NAMES:
        raise ValueError(f"unknown component {cid.name!r}; expected one of {COMPONENT_NAMES}")
    if cid.name not in ACTIVE_COMPONENTS:
        raise ValueError(f"component {cid.name!r} is reserved and absent from the two-matrix MLP")
    return model.params[cid.key]


def get_weights(model: Model, cid) -> np.ndarray:
    """Returns a copy of one component's weights."""
    return _component(model, cid).data.copy()


def set_weights(model: Model, cid, values: np.ndarray):
    """
    Replaces one component's weights in place.

    Raises:
        ValueError: If the new array's shape differs from the existing one.
    """
    node = _component(model, cid)
    values = np.asarray(values)
    if values.shape != node.shape:
        raise ValueError(
            f"set_weights: shape {values.shape} does not match {ComponentId(*cid).key} shape {node.shape}"
        )
    node.data[...] = values
    model.touch()


def fit_to_shape(values: np.ndarray, shape: tuple) -> np.ndarray:
    """
    Truncates or zero-pads an array along every axis to the given shape.

    Leading indices are kept; used when layers of different FFN width
    exchange MLP weights.
    """
    values = np.asarray(values)
    if values.ndim != len(shape):
        raise ValueError(f"fit_to_shape: cannot fit {values.shape} into {tuple(shape)}")
    if values.shape == tuple(shape):
        return values.copy()
    out = np.zeros(shape, dtype=values.dtype)
    region = tuple(slice(0, min(a, b)) for a, b in zip(values.shape, shape))
    out[region] = values[region]
    return out


def overlap_region(*shapes: tuple) -> tuple:
    """Slices selecting the leading index range common to all shapes."""
    return tuple(slice(0, min(sizes)) for sizes in zip(*shapes))


def param_count(model: Model) -> int:
    return int(sum(param.data.size for param in model.params.values()))


def fingerprint(model: Model) -> str:
    """SHA-256 over every parameter's name and bytes, in parameter order."""
    if model._fingerprint is not None and model._fingerprint[0] == model._version:
        return model._fingerprint[1]
    digest = hashlib.sha256()
    for name, param in model.params.items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(param.data).tobytes())
    value = digest.hexdigest()
    model._fingerprint = (model._version, value)
    return value


def layer_hash(model: Model, layer: int) -> str:
    digest = hashlib.sha256()
    for name in model.layer_param_names(layer):
        digest.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return digest.hexdigest()


def clone(model: Model) -> Model:
    """Deep copy; the clone shares no arrays with the original."""
    params = {
        name: ValueNode(param.data.copy(), requires_grad=param.requires_grad, name=name, dtype=param.data.dtype)
        for name, param in model.params.items()
    }
    return Model(model.spec, params, model.seed, model.vocab)


def _padded(rows: list[tuple[int, ...]], pad_id: int, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    rows = [row[: block_size + 1] for row in rows]
    width = max(len(row) for row in rows) - 1
    inputs = np.full((len(rows), width), pad_id, dtype=np.int64)
    targets = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, row in enumerate(rows):
        inputs[i, : len(row) - 1] = row[:-1]
        targets[i, : len(row) - 1] = row[1:]
    return inputs, targets


def perplexity(model: Model, eval_set: EvalSet, batch_size: int = 32) -> float:
    """
    Perplexity of the model on a fixed sentence set.

    exp of the mean token-level cross-entropy over every next-token position
    of every sentence. Sentences are right-padded into batches; the causal
    mask keeps each sentence independent and padding targets are ignored.

    Args:
        model (Model): The model to evaluate.
        eval_set (EvalSet): Sentences tokenized against the model's vocabulary.
        batch_size (int): Sentences per forward pass.

    Returns:
        float: The perplexity.

    Raises:
        ValueError: If the eval set is empty or its vocabulary size differs.
    """
    if not eval_set.token_ids:
        raise ValueError("perplexity: empty eval set")
    if eval_set.vocab_size != model.spec.vocab_size:
        raise ValueError(
            f"perplexity: eval set vocabulary ({eval_set.vocab_size}) differs from model ({model.spec.vocab_size})"
        )
    key = cache_key(fingerprint(model), eval_set.hash)
    cached = ppl_cache.get(key)
    if cached is not None:
        return cached

    total_nll, total_tokens = 0.0, 0
    rows = list(eval_set.token_ids)
    with T.no_grad():
        for start in range(0, len(rows), batch_size):
            inputs, targets = _padded(rows[start : start + batch_size], eval_set.pad_id, model.spec.block_size)
            logits = model.forward(inputs)
            flat = T.reshape(logits, (-1, model.spec.vocab_size))
            count = int(np.sum(targets != eval_set.pad_id))
            loss = T.cross_entropy(flat, targets.reshape(-1), ignore_index=eval_set.pad_id)
            total_nll += float(loss.data) * count
            total_tokens += count
    mean_nll = total_nll / total_tokens
    # exp overflows past ~709; a model that far gone reports infinity
    value = math.exp(mean_nll) if mean_nll < 700 else float("inf")
    ppl_cache.set(key, value)
    return value


def mean_loss(
    model: Model, batches: Iterable[tuple[np.ndarray, np.ndarray]], active: Optional[set[int]] = None
) -> float:
    """Token-weighted mean cross-entropy over a finite batch stream."""
    total, count = 0.0, 0
    with T.no_grad():
        for inputs, targets in batches:
            n = int(np.sum(targets != model.pad_id)) if model.pad_id is not None else targets.size
            total += float(model.loss(inputs, targets, active).data) * n
            count += n
    if count == 0:
        raise ValueError("mean_loss: no evaluation batches")
    return total / count


def generate(model: Model, vocab: Vocabulary, prompt: str, max_new_tokens: int = 12) -> str:
    """Greedy continuation of a prompt, stopping at <eos>."""
    ids = [vocab.bos_id, *vocab.encode(prompt)]
    produced: list[int] = []
    start_time = time.time()
    with T.no_grad():
        for _ in range(max_new_tokens):
            window = np.asarray([ids[-model.spec.block_size :]])
            logits = model.forward(window).data[0, -1]
            next_id = int(np.argmax(logits))
            if next_id == vocab.eos_id:
                break
            ids.append(next_id)
            produced.append(next_id)
    logger.debug(f"Generated {len(produced)} tokens in {time.time() - start_time:.2f} seconds")
    return vocab.decode(produced)
