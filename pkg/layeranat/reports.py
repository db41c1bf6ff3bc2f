# layeranat/reports.py
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from .schemas import (
    BudgetAllocation,
    Category,
    ComparisonReport,
    ImportanceRecord,
    ManipulationResult,
    PredictabilityRecord,
    RecoveryCurve,
    RunConfig,
    TrainHistory,
)
from .settings import TOOL_VERSION

logger = logging.getLogger(__name__)

# Wall-clock fields go to the .timing.json sidecar
TIMING_FIELDS = {
    "history": {"wall_time"},
    "comparison": {"growth_time", "uniform_time", "time_saved_pct"},
}

CHART_TITLE = "Degradation (log scale)"
CHART_FLOOR_DECADE = -1  # 0.1%
CHART_PER_DECADE = 8


def closure(
    config: RunConfig, eval_hash: Optional[str], checkpoint_hash: Union[str, dict[str, Optional[str]], None]
) -> dict:
    """
    Everything an artifact depends on; equal closures give byte-identical artifacts.

    checkpoint_hash is a mapping of run name to hash when the artifact
    depends on more than one checkpoint.
    """
    return {
        "config": config.model_dump(mode="json"),
        "seed": config.seed,
        "eval_hash": eval_hash,
        "checkpoint_hash": checkpoint_hash,
        "tool_version": TOOL_VERSION,
    }


def _dump(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, (list, tuple)):
        return [_dump(item) for item in value]
    return value


def _atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_text(text, encoding="utf-8")
    os.replace(tmp_path, path)


def write_json(path: Path, kind: str, closure_block: dict, result: Any) -> Path:
    """
    Writes a single-document artifact: {"kind", "closure", "result"}.

    Keys are sorted and the layout fixed, so the bytes depend only on the
    content.
    """
    document = {"kind": kind, "closure": closure_block, "result": _dump(result)}
    _atomic_write(path, json.dumps(document, sort_keys=True, indent=2) + "\n")
    logger.info(f"Wrote {kind} artifact to {path}")
    return Path(path)


def write_jsonl(path: Path, kind: str, closure_block: dict, records: Iterable[BaseModel]) -> Path:
    """Writes a record stream: a header line with the closure, then one record per line."""
    lines = [json.dumps({"kind": kind, "closure": closure_block}, sort_keys=True)]
    lines.extend(json.dumps(_dump(record), sort_keys=True) for record in records)
    _atomic_write(path, "\n".join(lines) + "\n")
    logger.info(f"Wrote {len(lines) - 1} {kind} records to {path}")
    return Path(path)


def timing_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".timing.json")


def write_timing(path: Path, timings: dict) -> Path:
    sidecar = timing_path(path)
    _atomic_write(sidecar, json.dumps(timings, sort_keys=True, indent=2) + "\n")
    return sidecar


def read_timing(path: Path) -> dict:
    sidecar = timing_path(path)
    if not sidecar.is_file():
        return {}
    return json.loads(sidecar.read_text(encoding="utf-8"))


def history_payload(history: TrainHistory) -> tuple[dict, dict]:
    """(artifact body, timing) for a training history."""
    body = history.model_dump(mode="json", exclude=TIMING_FIELDS["history"])
    return body, {"wall_time": history.wall_time}


def comparison_payload(report: ComparisonReport) -> tuple[dict, dict]:
    body = report.model_dump(mode="json", exclude=TIMING_FIELDS["comparison"])
    timing = {name: getattr(report, name) for name in sorted(TIMING_FIELDS["comparison"])}
    return body, timing


def read_artifact(path: Path) -> dict:
    """
    Loads a JSON or JSON-lines artifact.

    Returns:
        dict: {"kind", "closure", "result"}; for JSON lines "result" is the
            list of records.

    Raises:
        ValueError: If the file is missing or not an artifact.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"cannot read artifact {path}: no such file")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".jsonl":
            lines = [json.loads(line) for line in text.splitlines() if line.strip()]
            if not lines or "kind" not in lines[0]:
                raise ValueError(f"{path}: missing artifact header line")
            return {"kind": lines[0]["kind"], "closure": lines[0].get("closure"), "result": lines[1:]}
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed artifact: {e}") from None
    if not isinstance(document, dict) or "kind" not in document:
        raise ValueError(f"{path}: not a layeranat artifact")
    return document


def load_records(path: Path, model_cls: type[BaseModel]) -> list:
    """Reads a JSON or JSON-lines artifact back into records of the given type."""
    result = read_artifact(path)["result"]
    if isinstance(result, dict):
        result = [result]
    return [model_cls.model_validate(item) for item in result]


# ASCII importance chart


def log_bar_length(degradation_pct: float, per_decade: int = CHART_PER_DECADE) -> int:
    """Bar length on the log axis; 0 for no degradation, at least 1 for any positive value."""
    magnitude = abs(degradation_pct)
    if magnitude == 0:
        return 0
    if math.isinf(magnitude):
        magnitude = 1e12
    position = math.log10(magnitude) - CHART_FLOOR_DECADE
    return max(1, int(round(position * per_decade)) + 1)


def render_ascii_importance(records: Sequence[ImportanceRecord]) -> str:
    """
    Plain-text log-scale bar chart of an importance map.

    Layers with non-negative degradation are drawn above the baseline row;
    anti-layers are drawn below it with 'v' bars.

    Raises:
        ValueError: If records is empty.
    """
    if not records:
        raise ValueError("render_ascii_importance: no records")
    finite = [abs(r.degradation_pct) for r in records if math.isfinite(r.degradation_pct)]
    top_decade = max(2, math.ceil(math.log10(max(finite)))) if finite and max(finite) > 0 else 2
    width = (top_decade - CHART_FLOOR_DECADE) * CHART_PER_DECADE + 1

    labels = []
    for decade in range(CHART_FLOOR_DECADE, top_decade + 1):
        labels.append(f"{10.0**decade:g}%".ljust(CHART_PER_DECADE))
    layer_width = len(f"L{max(r.layer for r in records)}")

    def row(record: ImportanceRecord, glyph: str) -> str:
        bar = glyph * min(width, log_bar_length(record.degradation_pct))
        tag = record.category.value + (f" ({record.annotation})" if record.annotation else "")
        return f"{f'L{record.layer}':>{layer_width}} |{bar.ljust(width)}| {record.degradation_pct:+9.1f}%  {tag}"

    lines = [CHART_TITLE, " " * (layer_width + 2) + "".join(labels).rstrip()]
    lines += [row(r, "#") for r in records if r.category != Category.anti]
    lines.append(f"{'':>{layer_width}} +{'-' * width}+ baseline (0%)")
    lines += [row(r, "v") for r in records if r.category == Category.anti]
    return "\n".join(lines) + "\n"


# Tables


def importance_frame(records: Sequence[ImportanceRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "layer": r.layer,
                "ppl": r.ppl_after,
                "degradation_pct": r.degradation_pct,
                "category": r.category.value,
                "annotation": r.annotation,
            }
            for r in records
        ]
    )


def predictability_frame(records: Sequence[PredictabilityRecord]) -> pd.DataFrame:
    """Average R² and cosine per component, undefined R² values excluded from the mean."""
    df = pd.DataFrame([r.model_dump() for r in records])
    summary = df.groupby("component", sort=False).agg(
        avg_r_squared=("r_squared", "mean"),
        avg_cosine=("cosine_similarity", "mean"),
        targets=("target_layer", "count"),
    )
    return summary.reset_index()


def recovery_frame(curves: Sequence[RecoveryCurve]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "layer": c.layer,
                "ppl_after_noise": c.ppl_after_noise,
                "steps_to_2x": c.steps_to_2x,
                "steps_to_1_5x": c.steps_to_1_5x,
                "steps_to_1_1x": c.steps_to_1_1x,
                "final_ppl": c.final_ppl,
                "improved": c.improved_below_baseline,
                "diverged": c.diverged,
            }
            for c in curves
        ]
    )


def manipulation_frame(results: Sequence[ManipulationResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "strategy": r.spec.strategy,
                "alpha": r.spec.alpha,
                "targets": ",".join(str(t) for t in r.spec.targets),
                "ppl": r.ppl,
                "degradation_pct": r.degradation_pct,
            }
            for r in results
        ]
    )


def budget_frame(allocation: BudgetAllocation) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "layer": range(len(allocation.ratios)),
            "group": allocation.groups,
            "ratio": allocation.ratios,
            "steps": allocation.steps,
        }
    )


def comparison_frame(report: ComparisonReport, timing: Optional[dict] = None) -> pd.DataFrame:
    """Configuration, steps, val loss, time and ratio for both protocols."""
    timing = timing if timing is not None else {"growth_time": report.growth_time, "uniform_time": report.uniform_time}
    return pd.DataFrame(
        [
            {
                "configuration": f"Growth ({report.step_pct:.0f}%)",
                "steps": report.growth_steps,
                "val_loss": report.growth_val_loss,
                "time_s": timing.get("growth_time"),
                "ratio": report.ratio,
            },
            {
                "configuration": "Uniform (100%)",
                "steps": report.uniform_steps,
                "val_loss": report.uniform_val_loss,
                "time_s": timing.get("uniform_time"),
                "ratio": 1.0,
            },
        ]
    )


def render_table(df: pd.DataFrame) -> str:
    return df.to_string(index=False, float_format=lambda x: f"{x:.4g}") + "\n"


def write_summary(path: Path, text: str, df: Optional[pd.DataFrame] = None, csv: bool = False) -> Path:
    """Writes a text summary next to an artifact, plus the table as CSV when asked."""
    path = Path(path)
    _atomic_write(path, text)
    if csv and df is not None:
        csv_path = path.with_suffix(".csv")
        df.to_csv(csv_path, index=False)
        logger.info(f"Wrote table CSV to {csv_path}")
    return path
