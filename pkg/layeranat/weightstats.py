# layeranat/weightstats.py
import logging
import math
from typing import Optional, Sequence

import numpy as np

from .corpus import EvalSet
from .diagnostics import check_unchanged, evaluate_edits
from .model import ACTIVE_COMPONENTS, ComponentId, Model, fingerprint, get_weights, overlap_region
from .schemas import DeltaCorrelationRecord, PredictabilityRecord, StructureSummary

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE = 10_000
DEFAULT_LAMBDA = 1.0
# Pearson correlation of consecutive deltas when every layer is an independent draw
IID_DELTA_CORRELATION = -0.5


def layer_features(layers: Sequence[int], num_layers: int) -> np.ndarray:
    """Design rows [l, l², sin(lπ/N), cos(lπ/N), 1], intercept last."""
    l = np.asarray(layers, dtype=np.float64)
    angle = l * np.pi / num_layers
    return np.column_stack([l, l**2, np.sin(angle), np.cos(angle), np.ones_like(l)])


def ridge_fit(X: np.ndarray, Y: np.ndarray, ridge_lambda: float) -> np.ndarray:
    """
    Multi-output ridge with an unpenalized intercept (last column of X).

    Solves (XᵀX + λI′)B = XᵀY where I′ is the identity with the intercept
    entry zeroed. Every column of Y shares the design matrix.

    Args:
        X (np.ndarray): Design matrix (n, p).
        Y (np.ndarray): Targets (n, k).
        ridge_lambda (float): Penalty on the non-intercept coefficients.

    Returns:
        np.ndarray: Coefficients (p, k).
    """
    if ridge_lambda < 0:
        raise ValueError(f"ridge_fit: lambda must be non-negative, got {ridge_lambda}")
    penalty = np.eye(X.shape[1]) * ridge_lambda
    penalty[-1, -1] = 0.0
    gram = X.T @ X + penalty
    rhs = X.T @ Y
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        logger.debug("Ridge system singular, falling back to least squares")
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def r_squared(predicted: np.ndarray, actual: np.ndarray) -> Optional[float]:
    """1 − SSE/SST with SST about the actual mean; None when the actual values are constant."""
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0.0:
        return None
    sse = float(np.sum((actual - predicted) ** 2))
    return 1.0 - sse / sst


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 1.0 if not np.any(a) and not np.any(b) else 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        return None
    return float(np.dot(a, b) / denom)


def layer_stack(
    model: Model, component: str, layers: Sequence[int], sample_size: Optional[int], seed: int
) -> tuple[np.ndarray, list[str]]:
    """
    Flattened weights of one component across layers, as a (layers, k) matrix.

    Layers of different width contribute only their shared leading index
    range. With sample_size set, k positions are drawn without replacement
    (seeded) and used for every layer.
    """
    if component not in ACTIVE_COMPONENTS:
        raise ValueError(f"unknown component {component!r}; expected one of {ACTIVE_COMPONENTS}")
    mats = [get_weights(model, ComponentId(layer, component)) for layer in layers]
    notes = []
    region = overlap_region(*(m.shape for m in mats))
    if any(m.shape != mats[0].shape for m in mats):
        shared = tuple(s.stop for s in region)
        notes.append(f"{component}: widths differ, sampling restricted to common range {shared}")
    rows = np.stack([m[region].reshape(-1) for m in mats]).astype(np.float64)
    if sample_size is not None:
        if sample_size < rows.shape[1]:
            positions = np.sort(np.random.default_rng(seed).choice(rows.shape[1], sample_size, replace=False))
            rows = rows[:, positions]
        elif sample_size > rows.shape[1]:
            notes.append(f"{component}: only {rows.shape[1]} entries available, sampled all")
    return rows, notes


def predict_row(stack: np.ndarray, target_layer: int, num_layers: int, ridge_lambda: float) -> np.ndarray:
    """Ridge prediction of row target_layer from rows 0..target_layer-1."""
    X = layer_features(range(target_layer), num_layers)
    coef = ridge_fit(X, stack[:target_layer], ridge_lambda)
    return (layer_features([target_layer], num_layers) @ coef)[0]


def predictability(
    model: Model,
    component: str,
    target_layer: int,
    k: int = DEFAULT_SAMPLE,
    ridge_lambda: float = DEFAULT_LAMBDA,
    seed: int = 0,
) -> PredictabilityRecord:
    """
    How well a component at target_layer is predicted from the layers below it.

    Args:
        model (Model): The model to inspect.
        component (str): Projection name, e.g. "q_proj".
        target_layer (int): Layer t >= 2 to predict from layers 0..t-1.
        k (int): Sampled parameter positions shared across layers.
        ridge_lambda (float): Ridge penalty.
        seed (int): Sampling seed.

    Returns:
        PredictabilityRecord: R² (None when the target is constant) and cosine.

    Raises:
        ValueError: If t < 2, t is out of range or the component is unknown.
    """
    if target_layer < 2:
        raise ValueError(f"predictability: target layer must be >= 2, got {target_layer}")
    model._check_layer(target_layer)
    stack, notes = layer_stack(model, component, range(target_layer + 1), k, seed)
    predicted = predict_row(stack, target_layer, model.num_layers, ridge_lambda)
    actual = stack[target_layer]
    r2 = r_squared(predicted, actual)
    if r2 is None:
        notes.append("target weights are constant, R² undefined")
    return PredictabilityRecord(
        component=component,
        target_layer=target_layer,
        r_squared=r2,
        cosine_similarity=cosine(predicted, actual),
        sample_size=stack.shape[1],
        ridge_lambda=ridge_lambda,
        seed=seed,
        notes=tuple(notes),
    )


def predictability_table(
    model: Model,
    components: Sequence[str] = ACTIVE_COMPONENTS,
    k: int = DEFAULT_SAMPLE,
    ridge_lambda: float = DEFAULT_LAMBDA,
    seed: int = 0,
) -> list[PredictabilityRecord]:
    """Predictability of every component at every target layer from 2 up."""
    return [
        predictability(model, component, t, k=k, ridge_lambda=ridge_lambda, seed=seed)
        for component in components
        for t in range(2, model.num_layers)
    ]


def replacement_edits(model: Model, layers: Sequence[int], ridge_lambda: float) -> tuple[dict, list[str]]:
    """Full-matrix ridge predictions for every component of the given layers, each fit independently."""
    edits = {}
    notes: list[str] = []
    for t in sorted(set(layers)):
        if t < 2:
            raise ValueError(f"predict_and_replace: layer {t} needs at least 2 layers below it")
        model._check_layer(t)
        for component in ACTIVE_COMPONENTS:
            cid = ComponentId(t, component)
            original = get_weights(model, cid)
            stack, stack_notes = layer_stack(model, component, range(t + 1), None, 0)
            notes.extend(f"layer {t}: {note}" for note in stack_notes)
            predicted = predict_row(stack, t, model.num_layers, ridge_lambda)
            region = overlap_region(*(get_weights(model, (l, component)).shape for l in range(t + 1)))
            replaced = original.copy()
            replaced[region] = predicted.reshape(replaced[region].shape)
            edits[cid] = replaced
    return edits, notes


def predict_and_replace(
    model: Model, layers: Sequence[int], eval_set: EvalSet, ridge_lambda: float = DEFAULT_LAMBDA
) -> float:
    """
    Perplexity after replacing whole layers by their ridge predictions.

    Predictions are computed from the unmodified model, then all
    replacements are applied together; the model is restored afterwards.
    """
    before = fingerprint(model)
    edits, notes = replacement_edits(model, layers, ridge_lambda)
    for note in notes:
        logger.info(note)
    [ppl] = evaluate_edits(model, eval_set, [edits], threads=1)
    check_unchanged(model, before, "predict_and_replace")
    logger.info(f"Replaced layers {sorted(set(layers))} with ridge predictions: PPL {ppl:.3f}")
    return ppl


def delta_correlations(stack: np.ndarray) -> list[Optional[float]]:
    """Pearson correlation of consecutive deltas Δ_l = W_{l+1} − W_l, None where a delta is constant."""
    deltas = np.diff(np.asarray(stack, dtype=np.float64), axis=0)
    return [pearson(deltas[l], deltas[l + 1]) for l in range(len(deltas) - 1)]


def delta_correlation(
    model: Model, component: str, sample_size: Optional[int] = None, seed: int = 0
) -> DeltaCorrelationRecord:
    """
    Consecutive-delta correlation of one component through the stack.

    The record carries the i.i.d. reference value (−0.5) alongside the
    measured mean, since consecutive deltas share their middle layer.

    Raises:
        ValueError: With fewer than 3 layers.
    """
    if model.num_layers < 3:
        raise ValueError(f"delta_correlation: needs at least 3 layers, model has {model.num_layers}")
    stack, notes = layer_stack(model, component, range(model.num_layers), sample_size, seed)
    gaps = delta_correlations(stack)
    defined = [rho for rho in gaps if rho is not None]
    if len(defined) < len(gaps):
        notes.append(f"{len(gaps) - len(defined)} gaps have a constant delta and are excluded")
    return DeltaCorrelationRecord(
        component=component,
        gaps=tuple(gaps),
        mean=float(np.mean(defined)) if defined else None,
        iid_reference=IID_DELTA_CORRELATION,
        element_count=stack.shape[1],
        notes=tuple(notes),
    )


def cosine_matrix(stack: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(stack, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    unit = stack / safe[:, None]
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(matrix, np.where(norms == 0, 0.0, 1.0))
    return matrix


def explained_variance(stack: np.ndarray) -> np.ndarray:
    """PCA explained-variance ratios of the layer-by-sample matrix, centered by column means."""
    centered = stack - stack.mean(axis=0, keepdims=True)
    singular = np.linalg.svd(centered, compute_uv=False)
    variance = singular**2
    total = variance.sum()
    if total == 0:
        return np.zeros_like(variance)
    return variance / total


def structure_summary(
    model: Model, component: str, k_components: int = 5, sample_size: int = DEFAULT_SAMPLE, seed: int = 0
) -> StructureSummary:
    """
    Pairwise cosine similarity and PCA spectrum of one component across layers.

    Raises:
        ValueError: With fewer than 2 layers or k_components < 1.
    """
    if model.num_layers < 2:
        raise ValueError(f"structure_summary: needs at least 2 layers, model has {model.num_layers}")
    if k_components < 1:
        raise ValueError(f"structure_summary: k_components must be positive, got {k_components}")
    stack, notes = layer_stack(model, component, range(model.num_layers), sample_size, seed)
    ratios = explained_variance(stack)
    if k_components > len(ratios):
        notes.append(f"requested {k_components} components, only {len(ratios)} layers available")
    return StructureSummary(
        component=component,
        cosine_matrix=tuple(tuple(float(x) for x in row) for row in cosine_matrix(stack)),
        explained_variance_ratio=tuple(float(x) for x in ratios[:k_components]),
        sample_size=stack.shape[1],
        seed=seed,
        notes=tuple(notes),
    )
