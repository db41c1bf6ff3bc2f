from enum import Enum
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .settings import DEFAULT_CORPUS, DEFAULT_EVAL, DEFAULT_PROMPTS


class LayerRole(str, Enum):
    critical = "critical"
    minor = "minor"
    redundant = "redundant"
    anti = "anti"


class Category(str, Enum):
    """Ablation category, ordered from least to most important."""

    anti = "anti"
    redundant = "redundant"
    minor = "minor"
    important = "important"
    critical = "critical"


CATEGORY_RANK = {category: rank for rank, category in enumerate(Category)}


class LayerSpec(BaseModel):
    """
    Describes one decoder layer of a heterogeneous model.
    """

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0)
    role: LayerRole
    ffn_multiplier: int = Field(gt=0)


class ModelSpec(BaseModel):
    """
    Represents the architecture of a decoder-only model.

    Divisibility of model_dim by head_count is checked when the model is
    built, so an invalid spec can still be described and reported.
    """

    model_config = ConfigDict(frozen=True)

    layers: tuple[LayerSpec, ...]
    model_dim: int = Field(gt=0)
    head_count: int = Field(gt=0)
    vocab_size: int = Field(gt=0)
    block_size: int = Field(gt=0)

    @model_validator(mode="after")
    def _check_layer_order(self):
        if not self.layers:
            raise ValueError("ModelSpec needs at least one layer")
        indices = [layer.index for layer in self.layers]
        if indices != list(range(len(indices))):
            raise ValueError(f"layer indices must be 0..{len(indices) - 1} in order, got {indices}")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.layers)


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = Field(default=0.01, ge=0)
    clip: float = Field(default=1.0, gt=0)


class ImportanceRecord(BaseModel):
    """
    Result of ablating one layer by neighbor averaging.
    """

    model_config = ConfigDict(frozen=True)

    layer: int
    ppl_baseline: float
    ppl_after: float
    degradation_pct: float
    category: Category
    boundary: bool = False
    annotation: str = ""
    notes: tuple[str, ...] = ()


class PredictabilityRecord(BaseModel):
    """
    Ridge fit of one component across layers 0..t-1, evaluated at layer t.

    r_squared is None when the actual target weights are constant (SST = 0).
    """

    model_config = ConfigDict(frozen=True)

    component: str
    target_layer: int
    r_squared: Optional[float]
    cosine_similarity: float
    sample_size: int
    ridge_lambda: float
    seed: int
    notes: tuple[str, ...] = ()


class DeltaCorrelationRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    component: str
    gaps: tuple[Optional[float], ...]
    mean: Optional[float]
    iid_reference: float = -0.5
    element_count: int
    notes: tuple[str, ...] = ()


class StructureSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    component: str
    cosine_matrix: tuple[tuple[float, ...], ...]
    explained_variance_ratio: tuple[float, ...]
    sample_size: int
    seed: int
    notes: tuple[str, ...] = ()


Strategy = Literal["zero", "clone", "blend", "lowrank-blend", "scale"]


class ManipulationSpec(BaseModel):
    """
    Represents one weight manipulation applied to a set of target layers.
    """

    model_config = ConfigDict(frozen=True)

    strategy: Strategy
    targets: tuple[int, ...]
    alpha: Optional[float] = None
    neighbor_count: int = Field(default=4, ge=1)

    @field_validator("targets")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("manipulation needs at least one target layer")
        return tuple(sorted(set(value)))

    @model_validator(mode="after")
    def _check_alpha(self):
        if self.strategy == "scale":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError(f"scale requires alpha in [0, 1], got {self.alpha}")
        return self


class ManipulationResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: ManipulationSpec
    ppl_baseline: float
    ppl: float
    degradation_pct: float
    notes: tuple[str, ...] = ()


class RecoveryCurve(BaseModel):
    """
    Represents a single-layer recovery trajectory after noise injection.

    steps_to_* are None when the threshold was never reached.
    """

    model_config = ConfigDict(frozen=True)

    layer: int
    noise_scale: float
    ppl_baseline: float
    ppl_after_noise: float
    samples: tuple[tuple[int, float], ...]
    steps_to_2x: Optional[int]
    steps_to_1_5x: Optional[int]
    steps_to_1_1x: Optional[int]
    final_ppl: float
    improved_below_baseline: bool
    diverged: bool = False
    boundary: bool = False
    checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _check_monotone(self):
        reached = [self.steps_to_2x, self.steps_to_1_5x, self.steps_to_1_1x]
        if all(step is not None for step in reached) and reached != sorted(reached):
            raise ValueError(f"recovery thresholds out of order: {reached}")
        return self


class Phase(BaseModel):
    """
    One developmental phase: which layers train, which are cloned in first.
    """

    model_config = ConfigDict(frozen=True)

    name: str
    trainable_layers: tuple[int, ...]
    clone_directives: tuple[tuple[int, int], ...] = ()
    epochs: int = Field(ge=0)
    ffn_scale_on_clone: float = 1.0

    @model_validator(mode="after")
    def _check_epochs(self):
        if self.epochs == 0 and not self.clone_directives:
            raise ValueError(f"phase {self.name!r} has no epochs and no clone directives")
        return self

    @property
    def clone_only(self) -> bool:
        return self.epochs == 0


class PhasePlan(BaseModel):
    """
    Ordered developmental phases.

    Embeddings, position table, final norm and head (always_trainable) receive
    updates in every phase.
    """

    model_config = ConfigDict(frozen=True)

    phases: tuple[Phase, ...]
    always_trainable: tuple[str, ...] = ("tok_emb", "pos_emb", "ln_f.gamma", "ln_f.beta", "head")
    core_layers: tuple[int, ...] = ()

    @model_validator(mode="after")
    def _check_introduction_order(self):
        trained: set[int] = set()
        for phase in self.phases:
            for _, dst in phase.clone_directives:
                if dst in trained:
                    raise ValueError(
                        f"phase {phase.name!r} clones into layer {dst}, which already trained"
                    )
            trained.update(phase.trainable_layers)
        return self

    @model_validator(mode="after")
    def _check_core_first(self):
        first = next((phase for phase in self.phases if not phase.clone_only), None)
        if self.core_layers and (first is None or not set(self.core_layers) <= set(first.trainable_layers)):
            raise ValueError(f"core layers {list(self.core_layers)} must train in the first training phase")
        return self

    def validate_for(self, num_layers: int) -> None:
        """Checks that the plan addresses exactly the layers 0..num_layers-1 and covers them all."""
        covered: set[int] = set()
        for phase in self.phases:
            covered.update(phase.trainable_layers)
            covered.update(dst for _, dst in phase.clone_directives)
            referenced = set(phase.trainable_layers) | {i for pair in phase.clone_directives for i in pair}
            if any(layer >= num_layers for layer in referenced):
                raise ValueError(
                    f"phase {phase.name!r} references layers {sorted(referenced)} "
                    f"but the model has {num_layers} layers"
                )
        if covered != set(range(num_layers)):
            missing = sorted(set(range(num_layers)) - covered)
            raise ValueError(f"plan leaves layers {missing} untrained")

    def effective_epochs(self, num_layers: int) -> list[int]:
        """Sum of epochs of the phases in which each layer was trainable."""
        totals = [0] * num_layers
        for phase in self.phases:
            for layer in phase.trainable_layers:
                totals[layer] += phase.epochs
        return totals


class BudgetAllocation(BaseModel):
    model_config = ConfigDict(frozen=True)

    ratios: tuple[float, ...]
    groups: tuple[str, ...]
    steps: tuple[int, ...]
    b_max: int
    total_steps: int
    uniform_total: int
    reduction_pct: float


class EvalPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int
    val_loss: float
    ppl: float


class PhaseBoundary(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    start_step: int
    steps: int
    trainable_layers: tuple[int, ...]
    clone_directives: tuple[tuple[int, int], ...] = ()


class TrainHistory(BaseModel):
    """
    Represents the record of one training run.

    effective_epochs counts, per layer, the plan epochs of the phases that
    trained it (growth) or the passes over the training blocks (uniform).
    trained_steps is the number of optimizer updates each layer received.
    """

    protocol: Literal["growth", "uniform"]
    seed: int
    step_budget: int
    steps_total: int
    steps_per_epoch: int
    param_count: int
    eval_hash: str
    train_losses: list[tuple[int, float]] = []
    evals: list[EvalPoint] = []
    phase_boundaries: list[PhaseBoundary] = []
    trained_steps: list[int] = []
    effective_epochs: list[float] = []
    wall_time: float = 0.0
    notes: list[str] = []

    @property
    def final_val_loss(self) -> float:
        if not self.evals:
            raise ValueError(f"{self.protocol} history has no evaluations")
        return self.evals[-1].val_loss


class Completion(BaseModel):
    prompt: str
    growth: str
    uniform: str


class ComparisonReport(BaseModel):
    """
    Represents a Growth-vs-Uniform comparison (one row pair of the summary table).
    """

    eval_hash: str
    param_count: int
    growth_steps: int
    uniform_steps: int
    step_pct: float
    growth_val_loss: float
    uniform_val_loss: float
    ratio: float
    growth_time: float
    uniform_time: float
    time_saved_pct: Optional[float]
    growth_effective_epochs: list[float]
    uniform_effective_epochs: list[float]
    completions: list[Completion] = []
    notes: list[str] = []


class RunConfig(BaseModel):
    """
    Everything a run depends on; serialized into every artifact.
    """

    corpus_path: Path = DEFAULT_CORPUS
    eval_path: Path = DEFAULT_EVAL
    prompts_path: Path = DEFAULT_PROMPTS
    corpus_passes: int = Field(default=12, ge=1)
    seed: int = 0
    model_dim: int = Field(default=64, gt=0)
    head_count: int = Field(default=4, gt=0)
    block_size: int = Field(default=64, gt=1)
    batch_size: int = Field(default=8, gt=0)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    layers: Optional[tuple[LayerSpec, ...]] = None
    optimizer: OptimizerSettings = OptimizerSettings()
    eval_every: int = Field(default=50, gt=0)
    params: dict[str, Any] = {}

    def model_spec(self, vocab_size: int) -> ModelSpec:
        from .model import growth_spec

        if self.layers is None:
            return growth_spec(vocab_size, self.model_dim, self.head_count, self.block_size)
        return ModelSpec(
            layers=self.layers,
            model_dim=self.model_dim,
            head_count=self.head_count,
            vocab_size=vocab_size,
            block_size=self.block_size,
        )
