# layeranat/growth.py
import logging
import math
import time
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import EvalSet, TrainingData
from .model import (
    ACTIVE_COMPONENTS,
    MLP_COMPONENTS,
    NORM_PARAMS,
    ComponentId,
    Model,
    fit_to_shape,
    generate,
    get_weights,
    mean_loss,
    param_count,
    set_weights,
)
from .optim import DivergenceError, OptimizerState, adamw_step, clip_grad_norm
from .schemas import (
    ComparisonReport,
    Completion,
    EvalPoint,
    OptimizerSettings,
    Phase,
    PhaseBoundary,
    PhasePlan,
    TrainHistory,
)
from .settings import stream_seed

logger = logging.getLogger(__name__)

Batches = Iterator[tuple[np.ndarray, np.ndarray]]


def nearest_trained(layer: int, trained: set[int]) -> int:
    """Closest already-trained layer by index, ties toward the lower index."""
    if not trained:
        raise ValueError(f"no trained layer to clone into layer {layer}")
    return min(trained, key=lambda i: (abs(i - layer), i))


def default_phase_plan() -> PhasePlan:
    """
    The six developmental phases for the twelve-layer growth stack.

    The core (L4, L5) trains in the first three phases and in maturation.
    Connective-phase layers are cloned from their nearest trained neighbor
    with the FFN halved.
    """
    core = (4, 5)
    connective = (0, 3, 6, 11)
    trained_before_connective = {1, 2, 4, 5, 7, 8, 9, 10}
    phases = (
        Phase(name="gastrulation", trainable_layers=core, epochs=30),
        Phase(name="neurulation", trainable_layers=(1, 2, *core), clone_directives=((4, 1), (5, 2)), epochs=20),
        Phase(name="organogenesis", trainable_layers=(*core, 8, 9), clone_directives=((4, 8), (5, 9)), epochs=20),
        Phase(name="growth", trainable_layers=(7, 10), clone_directives=((5, 7), (9, 10)), epochs=12),
        Phase(
            name="connective",
            trainable_layers=connective,
            clone_directives=tuple((nearest_trained(dst, trained_before_connective), dst) for dst in connective),
            epochs=6,
            ffn_scale_on_clone=0.5,
        ),
        Phase(name="maturation", trainable_layers=tuple(range(12)), epochs=15),
    )
    return PhasePlan(phases=phases, core_layers=core)


def clone_layer(
    model: Model,
    src: int,
    dst: int,
    noise_std_fraction: float = 0.02,
    ffn_scale: float = 1.0,
    seed: int = 0,
) -> None:
    """
    Initializes layer dst from layer src.

    Attention projections and norms are copied; MLP projections are copied
    with leading-index truncation or zero-padding when the widths differ.
    Each projection then receives Gaussian noise with std
    noise_std_fraction × std(copied component), and the MLP projections are
    multiplied by ffn_scale.

    Raises:
        ValueError: If src == dst or either index is out of range.
    """
    if src == dst:
        raise ValueError(f"clone_layer: source and destination are both layer {src}")
    model._check_layer(src)
    model._check_layer(dst)
    rng = np.random.default_rng(seed)
    for norm in NORM_PARAMS:
        model.params[f"layers.{dst}.{norm}"].data[...] = model.params[f"layers.{src}.{norm}"].data
    for name in ACTIVE_COMPONENTS:
        target = ComponentId(dst, name)
        weights = fit_to_shape(get_weights(model, (src, name)), model.params[target.key].shape)
        if noise_std_fraction > 0:
            sigma = noise_std_fraction * float(np.std(weights, dtype=np.float64))
            weights = (weights + rng.normal(0.0, sigma, size=weights.shape)).astype(np.float32)
        if name in MLP_COMPONENTS and ffn_scale != 1.0:
            weights = weights * np.float32(ffn_scale)
        set_weights(model, target, weights)
    logger.info(f"Cloned layer {src} -> {dst} (noise {noise_std_fraction}, FFN x{ffn_scale})")


def phase_steps(epochs: Sequence[int], step_budget: int) -> list[int]:
    """
    Splits a step budget across phases in proportion to their epochs.

    Clone-only phases get 0; every training phase gets at least one step;
    rounding remainders go to the last training phase so the sum is exact.
    """
    training = [i for i, e in enumerate(epochs) if e > 0]
    if step_budget < len(training):
        raise ValueError(f"step budget {step_budget} is smaller than the {len(training)} training phases")
    total = sum(epochs)
    steps = [0] * len(epochs)
    for i in training[:-1]:
        steps[i] = max(1, round(step_budget * epochs[i] / total))
    steps[training[-1]] = step_budget - sum(steps)
    while steps[training[-1]] < 1:
        largest = max(training[:-1], key=lambda i: steps[i])
        steps[largest] -= 1
        steps[training[-1]] += 1
    return steps


class _Loop:
    """Shared step loop: one optimizer state, one batch stream, one eval cadence."""

    def __init__(
        self,
        model: Model,
        data: TrainingData,
        history: TrainHistory,
        optimizer: OptimizerSettings,
        eval_every: int,
    ):
        if len(data.val_blocks) == 0:
            raise ValueError("training needs validation blocks; val_fraction is 0")
        self.model = model
        self.data = data
        self.history = history
        self.settings = optimizer
        self.eval_every = eval_every
        self.state = OptimizerState(
            lr=optimizer.lr, betas=optimizer.betas, eps=optimizer.eps, weight_decay=optimizer.weight_decay
        )
        self.batches: Batches = data.batches()
        self.step = 0

    def evaluate(self, active: Optional[set[int]]):
        loss = mean_loss(self.model, self.data.val_batches(), active)
        ppl = math.exp(loss) if loss < 700 else float("inf")
        self.history.evals.append(EvalPoint(step=self.step, val_loss=loss, ppl=ppl))
        logger.info(f"[{self.history.protocol}] step {self.step}: val loss {loss:.4f}")

    def run(self, steps: int, trainable: Sequence[str], active: Optional[set[int]], final_step: int):
        model = self.model
        model.set_trainable(trainable)
        params = {name: model.params[name] for name in trainable}
        for _ in range(steps):
            inputs, targets = next(self.batches)
            model.zero_grad()
            loss = model.loss(inputs, targets, active)
            value = float(loss.data)
            self.step += 1
            if not math.isfinite(value):
                logger.error(f"[{self.history.protocol}] non-finite loss at step {self.step}")
                raise DivergenceError(self.step, value)
            T.backward(loss)
            clip_grad_norm(params.values(), self.settings.clip)
            adamw_step(self.state, params)
            model.touch()
            self.history.train_losses.append((self.step, value))
            if self.step % self.eval_every == 0 or self.step == final_step:
                self.evaluate(active)
        model.set_trainable(None)


def _new_history(protocol: str, model: Model, data: TrainingData, eval_set: EvalSet, step_budget: int, seed: int):
    return TrainHistory(
        protocol=protocol,
        seed=seed,
        step_budget=step_budget,
        steps_total=0,
        steps_per_epoch=data.steps_per_epoch,
        param_count=param_count(model),
        eval_hash=eval_set.hash,
    )


def train_growth(
    model: Model,
    plan: PhasePlan,
    data: TrainingData,
    step_budget: int,
    eval_set: EvalSet,
    optimizer: OptimizerSettings = OptimizerSettings(),
    eval_every: int = 50,
    seed: int = 0,
    noise_std_fraction: float = 0.02,
) -> TrainHistory:
    """
    Trains a model through developmental phases.

    In each phase only the phase's layers plus the always-trainable tensors
    (embeddings, final norm, head) receive updates, and layers not yet
    introduced are bypassed. Clone directives run at the start of their
    phase. Phase epoch counts are scaled so the total equals step_budget.

    Args:
        model (Model): Freshly built model.
        plan (PhasePlan): Phases to run.
        data (TrainingData): Training and validation blocks.
        step_budget (int): Total optimizer steps.
        eval_set (EvalSet): Held-out sentences, hashed into the history.
        optimizer (OptimizerSettings): AdamW settings and clip norm.
        eval_every (int): Validation cadence in steps.
        seed (int): Root seed for the clone noise streams.
        noise_std_fraction (float): Clone noise as a fraction of component std.

    Returns:
        TrainHistory: Losses, evaluations, phase boundaries and effective epochs.

    Raises:
        ValueError: If the plan does not fit the model or the budget is too small.
        DivergenceError: If the training loss becomes non-finite.
    """
    plan.validate_for(model.num_layers)
    steps = phase_steps([phase.epochs for phase in plan.phases], step_budget)
    history = _new_history("growth", model, data, eval_set, step_budget, seed)
    loop = _Loop(model, data, history, optimizer, eval_every)
    start_time = time.time()

    introduced: set[int] = set()
    trained: set[int] = set()
    trained_steps = [0] * model.num_layers
    for phase, count in zip(plan.phases, steps):
        for src, dst in phase.clone_directives:
            if src not in trained:
                raise ValueError(f"phase {phase.name!r} clones from layer {src}, which has not trained yet")
            clone_layer(
                model,
                src,
                dst,
                noise_std_fraction=noise_std_fraction,
                ffn_scale=phase.ffn_scale_on_clone,
                seed=stream_seed(seed, f"clone:{phase.name}:{src}->{dst}"),
            )
            introduced.add(dst)
        introduced.update(phase.trainable_layers)
        history.phase_boundaries.append(
            PhaseBoundary(
                name=phase.name,
                start_step=loop.step,
                steps=count,
                trainable_layers=phase.trainable_layers,
                clone_directives=phase.clone_directives,
            )
        )
        if phase.clone_only:
            continue
        trainable = list(plan.always_trainable)
        for layer in sorted(phase.trainable_layers):
            trainable.extend(model.layer_param_names(layer))
            trained_steps[layer] += count
        phase_start = time.time()
        active = None if len(introduced) == model.num_layers else set(introduced)
        loop.run(count, trainable, active, final_step=step_budget)
        trained.update(phase.trainable_layers)
        logger.info(
            f"Phase {phase.name}: {count} steps on layers {sorted(phase.trainable_layers)} "
            f"in {time.time() - phase_start:.2f} seconds"
        )

    history.steps_total = loop.step
    history.trained_steps = trained_steps
    history.effective_epochs = [float(e) for e in plan.effective_epochs(model.num_layers)]
    history.wall_time = time.time() - start_time
    logger.info(f"Growth training finished: {loop.step} steps in {history.wall_time:.2f} seconds")
    return history


def train_uniform(
    model: Model,
    data: TrainingData,
    step_budget: int,
    eval_set: EvalSet,
    optimizer: OptimizerSettings = OptimizerSettings(),
    eval_every: int = 50,
    seed: int = 0,
) -> TrainHistory:
    """
    Trains every parameter at every step.

    Uses the same optimizer settings, batch order and eval cadence as
    train_growth, so only the freeze masks differ between the protocols.

    Raises:
        ValueError: If the budget is not positive.
        DivergenceError: If the training loss becomes non-finite.
    """
    if step_budget < 1:
        raise ValueError(f"step budget must be positive, got {step_budget}")
    history = _new_history("uniform", model, data, eval_set, step_budget, seed)
    loop = _Loop(model, data, history, optimizer, eval_every)
    start_time = time.time()
    loop.run(step_budget, list(model.params), None, final_step=step_budget)
    history.steps_total = loop.step
    history.trained_steps = [loop.step] * model.num_layers
    history.effective_epochs = [loop.step / data.steps_per_epoch] * model.num_layers
    history.wall_time = time.time() - start_time
    logger.info(f"Uniform training finished: {loop.step} steps in {history.wall_time:.2f} seconds")
    return history


def compare(
    growth: TrainHistory,
    uniform: TrainHistory,
    eval_set: EvalSet,
    growth_model: Optional[Model] = None,
    uniform_model: Optional[Model] = None,
    prompts: Sequence[str] = (),
) -> ComparisonReport:
    """
    Summarizes a Growth-vs-Uniform pair.

    ratio = uniform final val loss / growth final val loss. Greedy
    completions of the prompts are included when both models are given.

    Raises:
        ValueError: If the eval hashes or parameter counts differ.
    """
    for history in (growth, uniform):
        if history.eval_hash != eval_set.hash:
            raise ValueError(
                f"{history.protocol} run was evaluated on eval set {history.eval_hash[:12]}, "
                f"not {eval_set.hash[:12]}"
            )
    if growth.param_count != uniform.param_count:
        raise ValueError(f"parameter counts differ: growth {growth.param_count}, uniform {uniform.param_count}")

    completions = []
    if growth_model is not None and uniform_model is not None and growth_model.vocab is not None:
        vocab = growth_model.vocab
        completions = [
            Completion(prompt=p, growth=generate(growth_model, vocab, p), uniform=generate(uniform_model, vocab, p))
            for p in prompts
        ]
    notes = []
    if growth.step_budget != uniform.step_budget:
        notes.append(f"unequal budgets: growth {growth.step_budget}, uniform {uniform.step_budget}")
    time_saved = None
    if uniform.wall_time > 0:
        time_saved = (uniform.wall_time - growth.wall_time) / uniform.wall_time * 100.0
    return ComparisonReport(
        eval_hash=eval_set.hash,
        param_count=growth.param_count,
        growth_steps=growth.steps_total,
        uniform_steps=uniform.steps_total,
        step_pct=growth.steps_total / uniform.steps_total * 100.0,
        growth_val_loss=growth.final_val_loss,
        uniform_val_loss=uniform.final_val_loss,
        ratio=uniform.final_val_loss / growth.final_val_loss,
        growth_time=growth.wall_time,
        uniform_time=uniform.wall_time,
        time_saved_pct=time_saved,
        growth_effective_epochs=growth.effective_epochs,
        uniform_effective_epochs=uniform.effective_epochs,
        completions=completions,
        notes=notes,
    )
