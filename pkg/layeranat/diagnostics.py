# layeranat/diagnostics.py
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .corpus import EvalSet, TrainingData
from .model import (
    ACTIVE_COMPONENTS,
    ComponentId,
    Model,
    clone,
    fingerprint,
    fit_to_shape,
    get_weights,
    overlap_region,
    perplexity,
    set_weights,
)
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .schemas import (
    Category,
    ImportanceRecord,
    ManipulationResult,
    ManipulationSpec,
    RecoveryCurve,
)
from .settings import worker_count

logger = logging.getLogger(__name__)

Edits = dict[ComponentId, np.ndarray]

DEFAULT_ALPHAS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
RECOVERY_THRESHOLDS = {"steps_to_2x": 2.0, "steps_to_1_5x": 1.5, "steps_to_1_1x": 1.1}


def degradation(ppl: float, baseline: float) -> float:
    return (ppl / baseline - 1.0) * 100.0


def classify(degradation_pct: float) -> Category:
    """
    Maps a degradation percentage onto an importance category.

    Each interval is closed on the left: D < 0 anti, [0, 10) redundant,
    [10, 30) minor, [30, 100) important, D >= 100 critical.

    Raises:
        ValueError: If the degradation is NaN.
    """
    if math.isnan(degradation_pct):
        raise ValueError("classify: degradation is NaN")
    if degradation_pct < 0:
        return Category.anti
    if degradation_pct < 10:
        return Category.redundant
    if degradation_pct < 30:
        return Category.minor
    if degradation_pct < 100:
        return Category.important
    return Category.critical


def check_unchanged(model: Model, before: str, operation: str):
    after = fingerprint(model)
    if after != before:
        raise RuntimeError(f"{operation} modified the model (fingerprint {before[:12]} -> {after[:12]})")


@contextmanager
def patched(model: Model, edits: Mapping[ComponentId, np.ndarray]) -> Iterator[Model]:
    """Applies weight edits for the duration of the block, then restores the snapshot."""
    snapshot = {cid: get_weights(model, cid) for cid in edits}
    try:
        for cid, values in edits.items():
            set_weights(model, cid, values)
        yield model
    finally:
        for cid, values in snapshot.items():
            set_weights(model, cid, values)


def evaluate_edits(
    model: Model, eval_set: EvalSet, edit_sets: Sequence[Edits], threads: Optional[int] = None
) -> list[float]:
    """
    Perplexity of the model under each set of edits.

    With one worker the edits are applied to the model and undone in turn;
    with more, every evaluation runs on its own clone.
    """
    workers = min(worker_count(threads), max(1, len(edit_sets)))
    if workers == 1:
        results = []
        for edits in edit_sets:
            with patched(model, edits):
                results.append(perplexity(model, eval_set))
        return results

    def run(edits: Edits) -> float:
        variant = clone(model)
        with patched(variant, edits):
            return perplexity(variant, eval_set)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, edit_sets))


def neighbor_average(model: Model, layer: int) -> tuple[Edits, list[str]]:
    """
    Replacement weights for ablating a layer: the mean of its neighbors.

    Boundary layers take their single neighbor. When widths differ, only the
    leading index range shared by the layer and its neighbors is averaged;
    the rest keeps the layer's own values.
    """
    neighbors = [n for n in (layer - 1, layer + 1) if 0 <= n < model.num_layers]
    edits: Edits = {}
    notes: list[str] = []
    for name in ACTIVE_COMPONENTS:
        cid = ComponentId(layer, name)
        original = get_weights(model, cid)
        mats = [get_weights(model, (n, name)) for n in neighbors]
        if all(m.shape == original.shape for m in mats):
            edits[cid] = np.mean(np.stack(mats), axis=0, dtype=np.float64).astype(original.dtype)
            continue
        region = overlap_region(original.shape, *(m.shape for m in mats))
        replaced = original.copy()
        replaced[region] = np.mean(np.stack([m[region] for m in mats]), axis=0, dtype=np.float64)
        edits[cid] = replaced
        covered = tuple(s.stop for s in region)
        notes.append(f"{name}: averaged over overlap {covered} of {original.shape}")
    return edits, notes


def ablation_map(model: Model, eval_set: EvalSet, threads: Optional[int] = None) -> list[ImportanceRecord]:
    """
    Measures every layer's importance by neighbor-average ablation.

    Args:
        model (Model): Trained model; unchanged by the call.
        eval_set (EvalSet): Held-out sentences.
        threads (int, optional): Worker threads, capped by LAYERANAT_THREADS.

    Returns:
        list[ImportanceRecord]: One record per layer, in layer order.

    Raises:
        ValueError: If the model has fewer than two layers.
    """
    if model.num_layers < 2:
        raise ValueError(f"ablation_map: needs at least 2 layers, model has {model.num_layers}")
    start_time = time.time()
    before = fingerprint(model)
    baseline = perplexity(model, eval_set)
    plans = [neighbor_average(model, layer) for layer in range(model.num_layers)]
    ppls = evaluate_edits(model, eval_set, [edits for edits, _ in plans], threads)
    check_unchanged(model, before, "ablation_map")

    records = []
    last = model.num_layers - 1
    for layer, (ppl, (_, notes)) in enumerate(zip(ppls, plans)):
        d = degradation(ppl, baseline)
        category = classify(d)
        boundary = layer in (0, last)
        annotation = "anti-layer" if category == Category.anti else ("boundary" if boundary else "")
        records.append(
            ImportanceRecord(
                layer=layer,
                ppl_baseline=baseline,
                ppl_after=ppl,
                degradation_pct=d,
                category=category,
                boundary=boundary,
                annotation=annotation,
                notes=tuple(notes),
            )
        )
    logger.info(
        f"Ablation map over {model.num_layers} layers (baseline PPL {baseline:.3f}) "
        f"in {time.time() - start_time:.2f} seconds"
    )
    return records


def blend_weights(distances: Sequence[float]) -> np.ndarray:
    """Normalized inverse-distance weights: (1, 2, 3, 4) -> (0.48, 0.24, 0.16, 0.12)."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0 or np.any(distances <= 0):
        raise ValueError(f"blend_weights: distances must be positive, got {distances.tolist()}")
    inverse = 1.0 / distances
    return inverse / inverse.sum()


def lowrank_blend(original: np.ndarray, neighbor: np.ndarray) -> np.ndarray:
    """
    Singular directions from the neighbor, singular values from the original.

    Both decompositions list singular values in descending order, so the
    i-th direction pair of the neighbor is paired with the i-th magnitude of
    the original.
    """
    if original.shape != neighbor.shape:
        raise ValueError(f"lowrank_blend: incompatible shapes {original.shape} and {neighbor.shape}")
    _, s_orig, _ = np.linalg.svd(original.astype(np.float64), full_matrices=False)
    u_n, _, vt_n = np.linalg.svd(neighbor.astype(np.float64), full_matrices=False)
    return ((u_n * s_orig) @ vt_n).astype(original.dtype)


def nearest_sources(layer: int, targets: Sequence[int], num_layers: int, count: int) -> list[int]:
    """Closest non-target layers by index distance, ties toward the lower index."""
    excluded = set(targets)
    candidates = [i for i in range(num_layers) if i not in excluded]
    candidates.sort(key=lambda i: (abs(i - layer), i))
    return candidates[:count]


def manipulation_edits(model: Model, spec: ManipulationSpec) -> tuple[Edits, list[str]]:
    """
    Replacement weights for every component of every target layer.

    Raises:
        ValueError: If a target is out of range, or clone/blend/lowrank-blend
            is requested with every layer a target.
    """
    for layer in spec.targets:
        model._check_layer(layer)
    needs_source = spec.strategy in ("clone", "blend", "lowrank-blend")
    if needs_source and len(spec.targets) == model.num_layers:
        raise ValueError(f"{spec.strategy}: every layer is a target, no source layer remains")

    edits: Edits = {}
    notes: list[str] = []
    for target in spec.targets:
        count = spec.neighbor_count if spec.strategy == "blend" else 1
        sources = nearest_sources(target, spec.targets, model.num_layers, count) if needs_source else []
        if spec.strategy == "blend" and len(sources) < spec.neighbor_count:
            notes.append(f"layer {target}: blended {len(sources)} of {spec.neighbor_count} neighbors")
        for name in ACTIVE_COMPONENTS:
            cid = ComponentId(target, name)
            original = get_weights(model, cid)
            if spec.strategy == "zero":
                edits[cid] = np.zeros_like(original)
            elif spec.strategy == "scale":
                scaled = original * original.dtype.type(spec.alpha)
                scaled += 0  # -0.0 -> 0.0, so alpha 0 matches zero byte for byte
                edits[cid] = scaled
            else:
                mats = []
                for source in sources:
                    weights = get_weights(model, (source, name))
                    if weights.shape != original.shape:
                        notes.append(
                            f"layer {target} {name}: source L{source} {weights.shape} fitted to {original.shape}"
                        )
                    mats.append(fit_to_shape(weights, original.shape))
                if spec.strategy == "clone":
                    edits[cid] = mats[0]
                elif spec.strategy == "blend":
                    w = blend_weights([abs(source - target) for source in sources])
                    mixed = np.tensordot(w, np.stack(mats).astype(np.float64), axes=1)
                    edits[cid] = mixed.astype(original.dtype)
                else:
                    edits[cid] = lowrank_blend(original, mats[0])
    return edits, notes


def manipulate(model: Model, spec: ManipulationSpec, eval_set: EvalSet) -> ManipulationResult:
    """
    Applies a manipulation strategy to the target layers and evaluates it.

    Strategies: zero, clone (nearest non-target layer), blend (inverse-distance
    mean of the nearest non-target layers), lowrank-blend (neighbor directions
    with original singular values), scale (alpha times the original).

    Returns:
        ManipulationResult: Perplexity and degradation; the model is unchanged.
    """
    before = fingerprint(model)
    baseline = perplexity(model, eval_set)
    edits, notes = manipulation_edits(model, spec)
    [ppl] = evaluate_edits(model, eval_set, [edits], threads=1)
    check_unchanged(model, before, "manipulate")
    logger.info(f"{spec.strategy} on layers {list(spec.targets)}: PPL {baseline:.3f} -> {ppl:.3f}")
    return ManipulationResult(
        spec=spec,
        ppl_baseline=baseline,
        ppl=ppl,
        degradation_pct=degradation(ppl, baseline),
        notes=tuple(notes),
    )


def scale_sweep(
    model: Model,
    targets: Sequence[int],
    eval_set: EvalSet,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    threads: Optional[int] = None,
) -> list[ManipulationResult]:
    """Attenuation sweep: one scale manipulation per alpha, evaluated in parallel when allowed."""
    before = fingerprint(model)
    baseline = perplexity(model, eval_set)
    specs = [ManipulationSpec(strategy="scale", targets=tuple(targets), alpha=alpha) for alpha in alphas]
    plans = [manipulation_edits(model, spec) for spec in specs]
    ppls = evaluate_edits(model, eval_set, [edits for edits, _ in plans], threads)
    check_unchanged(model, before, "scale_sweep")
    return [
        ManipulationResult(
            spec=spec, ppl_baseline=baseline, ppl=ppl, degradation_pct=degradation(ppl, baseline), notes=tuple(notes)
        )
        for spec, ppl, (_, notes) in zip(specs, ppls, plans)
    ]


def noise_sigmas(model: Model, layer: int, noise_scale: float) -> dict[ComponentId, float]:
    """Per-component noise std: noise_scale times the std of that component's entries."""
    return {
        cid: noise_scale * float(np.std(get_weights(model, cid), dtype=np.float64))
        for cid in model.component_ids(layer)
    }


def inject_noise(model: Model, layer: int, noise_scale: float, rng: np.random.Generator) -> dict[ComponentId, float]:
    sigmas = noise_sigmas(model, layer, noise_scale)
    if noise_scale == 0:
        return sigmas
    for cid, sigma in sigmas.items():
        weights = get_weights(model, cid)
        noise = rng.normal(0.0, sigma, size=weights.shape)
        set_weights(model, cid, (weights + noise).astype(weights.dtype))
    return sigmas


def fine_tune_layer(
    model: Model,
    layer: int,
    batches: Iterator[tuple[np.ndarray, np.ndarray]],
    eval_set: EvalSet,
    max_steps: int = 200,
    eval_every: int = 10,
    lr: float = 1e-4,
    clip: float = 1.0,
    weight_decay: float = 0.01,
) -> tuple[list[tuple[int, float]], bool]:
    """
    Fine-tunes one layer in place with everything else frozen.

    Only the layer's projections and norms receive AdamW updates; embeddings,
    head, final norm and every other layer keep their values. Perplexity is
    sampled at step 0, every eval_every steps and at the last step.

    Returns:
        tuple[list[tuple[int, float]], bool]: (step, PPL) samples and whether
            the run stopped on a non-finite loss or perplexity.
    """
    names = model.layer_param_names(layer)
    flags = {name: param.requires_grad for name, param in model.params.items()}
    model.set_trainable(names)
    params = {name: model.params[name] for name in names}
    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    samples = [(0, perplexity(model, eval_set))]
    diverged = not math.isfinite(samples[0][1])
    try:
        for step in range(1, max_steps + 1):
            if diverged:
                break
            inputs, targets = next(batches)
            model.zero_grad()
            loss = model.loss(inputs, targets)
            if not np.isfinite(loss.data):
                logger.warning(f"Layer {layer} fine-tuning diverged at step {step}")
                diverged = True
                break
            T.backward(loss)
            clip_grad_norm(params.values(), clip)
            adamw_step(state, params)
            model.touch()
            if step % eval_every == 0 or step == max_steps:
                ppl = perplexity(model, eval_set)
                samples.append((step, ppl))
                diverged = not math.isfinite(ppl)
    finally:
        for name, param in model.params.items():
            param.requires_grad = flags[name]
            param.zero_grad()
    return samples, diverged


def steps_to(samples: Sequence[tuple[int, float]], threshold: float) -> Optional[int]:
    """First sampled step with PPL strictly below threshold, None if never reached."""
    for step, ppl in samples:
        if ppl < threshold:
            return step
    return None


def recovery_probe(
    model: Model,
    layer: int,
    data: TrainingData,
    eval_set: EvalSet,
    noise_scale: float = 0.5,
    max_steps: int = 200,
    eval_every: int = 10,
    lr: float = 1e-4,
    clip: float = 1.0,
    seed: int = 0,
    checkpoint_path: Optional[Path] = None,
) -> RecoveryCurve:
    """
    Measures how fast one layer recovers from Gaussian weight noise.

    Each component of the layer receives N(0, σ²) noise with σ = noise_scale
    × std(component); the layer alone is then fine-tuned on the training
    stream. Thresholds (2x, 1.5x, 1.1x) are measured against the pre-noise
    baseline on a clone, so the model itself is never modified.

    Args:
        model (Model): Trained model.
        layer (int): Layer to perturb and retrain.
        data (TrainingData): Source of fine-tuning batches.
        eval_set (EvalSet): Held-out sentences.
        noise_scale (float): Noise std as a fraction of each component's std.
        max_steps (int): Fine-tuning steps.
        eval_every (int): Evaluation cadence.
        lr (float): AdamW learning rate.
        clip (float): Gradient norm ceiling.
        seed (int): Noise seed.
        checkpoint_path (Path, optional): Where to keep the recovered weights.

    Returns:
        RecoveryCurve: The sampled trajectory and threshold crossings.

    Raises:
        ValueError: If the layer is out of range or the settings are invalid.
    """
    model._check_layer(layer)
    if noise_scale < 0 or max_steps < 0 or eval_every <= 0:
        raise ValueError(
            f"recovery_probe: invalid settings noise_scale={noise_scale}, "
            f"max_steps={max_steps}, eval_every={eval_every}"
        )
    start_time = time.time()
    before = fingerprint(model)
    baseline = perplexity(model, eval_set)

    probe = clone(model)
    inject_noise(probe, layer, noise_scale, np.random.default_rng(seed))
    samples, diverged = fine_tune_layer(
        probe, layer, data.batches(), eval_set, max_steps=max_steps, eval_every=eval_every, lr=lr, clip=clip
    )
    check_unchanged(model, before, "recovery_probe")

    checkpoint = None
    if checkpoint_path is not None:
        save_checkpoint(probe, checkpoint_path)
        checkpoint = str(checkpoint_path)
    reached = {field: steps_to(samples, factor * baseline) for field, factor in RECOVERY_THRESHOLDS.items()}
    final_ppl = samples[-1][1]
    logger.info(
        f"Recovery of layer {layer}: PPL {samples[0][1]:.3f} -> {final_ppl:.3f} "
        f"(baseline {baseline:.3f}) in {time.time() - start_time:.2f} seconds"
    )
    return RecoveryCurve(
        layer=layer,
        noise_scale=noise_scale,
        ppl_baseline=baseline,
        ppl_after_noise=samples[0][1],
        samples=tuple(samples),
        final_ppl=final_ppl,
        improved_below_baseline=final_ppl < baseline,
        diverged=diverged,
        boundary=layer in (0, model.num_layers - 1),
        checkpoint=checkpoint,
        **reached,
    )


def recovery_map(
    model: Model,
    layers: Sequence[int],
    data: TrainingData,
    eval_set: EvalSet,
    seed: int = 0,
    threads: Optional[int] = None,
    checkpoint_dir: Optional[Path] = None,
    **probe_kwargs,
) -> list[RecoveryCurve]:
    """Independent recovery probes for several layers, each on its own clone."""

    def probe(layer: int) -> RecoveryCurve:
        path = Path(checkpoint_dir) / f"recovered_L{layer}.bin" if checkpoint_dir is not None else None
        return recovery_probe(
            model, layer, data, eval_set, seed=seed + layer, checkpoint_path=path, **probe_kwargs
        )

    # Warm the cached baseline once before fanning out
    perplexity(model, eval_set)
    workers = min(worker_count(threads), max(1, len(layers)))
    if workers == 1:
        return [probe(layer) for layer in layers]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(probe, layers))


def default_recovery_layers(num_layers: int) -> list[int]:
    """
    Layer selection for recovery probes at any depth.

    Scales the reference selection for a 30-layer stack (first, second,
    early-core, mid, late and last layers) onto num_layers.
    """
    reference = (0, 1, 3, 5, 8, 10, 11, 14, 17, 23, 24, 27, 29)
    if num_layers < 1:
        raise ValueError("default_recovery_layers: num_layers must be positive")
    if num_layers == 1:
        return [0]
    return sorted({round(i * (num_layers - 1) / 29) for i in reference})
