# layeranat/main.py
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import click

from .budget import allocate_budget
from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .corpus import EvalSet, TrainingData, load_eval_set, prepare_data, read_lines
from .diagnostics import (
    ablation_map,
    default_recovery_layers,
    manipulate,
    recovery_map,
    scale_sweep,
)
from .growth import compare as compare_runs
from .growth import default_phase_plan, train_growth, train_uniform
from .model import ACTIVE_COMPONENTS, Model, build_model, perplexity, uniform_twin
from .optim import DivergenceError
from .reports import (
    budget_frame,
    closure,
    comparison_frame,
    comparison_payload,
    history_payload,
    importance_frame,
    load_records,
    manipulation_frame,
    predictability_frame,
    read_artifact,
    read_timing,
    recovery_frame,
    render_ascii_importance,
    render_table,
    write_json,
    write_jsonl,
    write_summary,
    write_timing,
)
from .schemas import (
    BudgetAllocation,
    Category,
    ComparisonReport,
    ImportanceRecord,
    ManipulationResult,
    ManipulationSpec,
    PredictabilityRecord,
    RecoveryCurve,
    RunConfig,
    TrainHistory,
)
from .settings import LOG_LEVEL, stream_seed, worker_count
from .weightstats import delta_correlation, predict_and_replace, predictability_table, structure_summary

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
DEFAULT_STEPS = 656


class LabGroup(click.Group):
    """Click group mapping failures to exit codes: 1 for invalid input, 2 for divergence."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except DivergenceError as e:
            logger.error(f"Runtime divergence: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(EXIT_DIVERGED)
        except (ValueError, OSError) as e:
            logger.error(f"Validation error: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(EXIT_INVALID)

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(
                args=args, prog_name=prog_name, complete_var=complete_var, standalone_mode=False, **extra
            )
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.ClickException as e:
            e.show()
            code = EXIT_INVALID
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_INVALID
        if standalone_mode:
            sys.exit(code)
        return code


def parse_layers(value: Optional[str]) -> Optional[tuple[int, ...]]:
    if value is None or value == "":
        return None
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated layer indices, got {value!r}") from None


def load_config(config_path: Optional[str], **overrides) -> RunConfig:
    """RunConfig from an optional JSON file, with CLI flags overriding field by field."""
    base = {}
    if config_path is not None:
        base = json.loads(Path(config_path).read_text(encoding="utf-8"))
    base.update({key: value for key, value in overrides.items() if value is not None})
    return RunConfig.model_validate(base)


def run_options(func):
    """Options shared by every command."""
    options = [
        click.option(
            "--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="RunConfig JSON file."
        ),
        click.option("--seed", type=int, default=None, help="Root seed."),
        click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--eval", "eval_path", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs", show_default=True),
        click.option("--csv", "csv", is_flag=True, help="Also write summary tables as CSV."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _checkpoint_context(checkpoint: str, config: RunConfig) -> tuple[Model, EvalSet, str]:
    model = load_checkpoint(checkpoint)
    if model.vocab is None:
        raise ValueError(f"checkpoint {checkpoint} carries no vocabulary")
    eval_set = load_eval_set(config.eval_path, model.vocab)
    return model, eval_set, file_hash(checkpoint)


def _training_data(config: RunConfig, model: Model) -> TrainingData:
    data, _ = prepare_data(config.model_copy(update={"block_size": model.spec.block_size}))
    if data.vocab.id_to_token != model.vocab.id_to_token:
        raise ValueError("corpus vocabulary differs from the checkpoint's vocabulary")
    return data


@click.group(cls=LabGroup)
@click.option("--log-level", default=LOG_LEVEL, show_default=True, help="Logging level.")
def cli(log_level: str):
    """Layer anatomy lab: train, dissect and grow small transformers."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s - %(levelname)s - %(message)s")


# Training


def _train(protocol: str, config: RunConfig, steps: int, out_dir: Path) -> tuple[Model, TrainHistory]:
    data, eval_set = prepare_data(config)
    spec = config.model_spec(len(data.vocab))
    if protocol == "uniform":
        spec = uniform_twin(spec)
    model = build_model(spec, seed=stream_seed(config.seed, "init"), vocab=data.vocab)
    if protocol == "growth":
        history = train_growth(
            model,
            default_phase_plan(),
            data,
            steps,
            eval_set,
            optimizer=config.optimizer,
            eval_every=config.eval_every,
            seed=config.seed,
        )
    else:
        history = train_uniform(
            model, data, steps, eval_set, optimizer=config.optimizer, eval_every=config.eval_every, seed=config.seed
        )
    checkpoint = out_dir / f"{protocol}.bin"
    save_checkpoint(model, checkpoint)
    body, timing = history_payload(history)
    artifact = out_dir / f"{protocol}_history.json"
    write_json(artifact, f"{protocol}-history", closure(config, eval_set.hash, file_hash(checkpoint)), body)
    write_timing(artifact, timing)
    text = (
        f"{protocol} training: {history.steps_total} steps, final val loss {history.final_val_loss:.4f}, "
        f"{history.param_count} parameters\n"
    )
    write_summary(out_dir / f"{protocol}_summary.txt", text)
    click.echo(text, nl=False)
    return model, history


@cli.command("train-uniform")
@run_options
@click.option("--steps", type=int, default=DEFAULT_STEPS, show_default=True, help="Optimizer step budget.")
def train_uniform_cmd(config_path, seed, corpus_path, eval_path, out_dir, csv, steps):
    """Train every layer at every step."""
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    config = config.model_copy(update={"params": {**config.params, "steps": steps}})
    _train("uniform", config, steps, Path(out_dir))


@cli.command("train-growth")
@run_options
@click.option("--steps", type=int, default=DEFAULT_STEPS, show_default=True, help="Optimizer step budget.")
def train_growth_cmd(config_path, seed, corpus_path, eval_path, out_dir, csv, steps):
    """Train through the six developmental phases."""
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    config = config.model_copy(update={"params": {**config.params, "steps": steps}})
    _train("growth", config, steps, Path(out_dir))


@cli.command("compare")
@run_options
@click.option("--steps", type=int, default=DEFAULT_STEPS, show_default=True, help="Uniform step budget.")
@click.option("--growth-steps", type=int, default=None, help="Growth step budget (defaults to --steps).")
@click.option("--growth-history", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--uniform-history", type=click.Path(exists=True, dir_okay=False), default=None)
def compare_cmd(
    config_path, seed, corpus_path, eval_path, out_dir, csv, steps, growth_steps, growth_history, uniform_history
):
    """Compare Growth against Uniform, training both unless histories are given."""
    out = Path(out_dir)
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    growth_steps = growth_steps if growth_steps is not None else steps

    if growth_history and uniform_history:
        artifacts = {"growth": read_artifact(growth_history), "uniform": read_artifact(uniform_history)}
        growth = TrainHistory.model_validate(artifacts["growth"]["result"])
        uniform = TrainHistory.model_validate(artifacts["uniform"]["result"])
        checkpoints = {name: (doc.get("closure") or {}).get("checkpoint_hash") for name, doc in artifacts.items()}
        growth.wall_time = read_timing(growth_history).get("wall_time", 0.0)
        uniform.wall_time = read_timing(uniform_history).get("wall_time", 0.0)
        _, eval_set = prepare_data(config)
        report = compare_runs(growth, uniform, eval_set)
    elif growth_history or uniform_history:
        raise click.UsageError("--growth-history and --uniform-history must be given together")
    else:
        config = config.model_copy(
            update={"params": {**config.params, "steps": steps, "growth_steps": growth_steps}}
        )
        runs = {"growth": growth_steps, "uniform": steps}
        if worker_count() > 1:
            with ThreadPoolExecutor(max_workers=2) as pool:
                futures = {name: pool.submit(_train, name, config, budget, out) for name, budget in runs.items()}
                results = {name: future.result() for name, future in futures.items()}
        else:
            results = {name: _train(name, config, budget, out) for name, budget in runs.items()}
        (growth_model, growth), (uniform_model, uniform) = results["growth"], results["uniform"]
        _, eval_set = prepare_data(config)
        prompts = read_lines(config.prompts_path)
        report = compare_runs(growth, uniform, eval_set, growth_model, uniform_model, prompts)
        checkpoints = {name: file_hash(out / f"{name}.bin") for name in runs}

    body, timing = comparison_payload(report)
    artifact = out / "comparison.json"
    write_json(artifact, "comparison", closure(config, eval_set.hash, checkpoints), body)
    write_timing(artifact, timing)
    df = comparison_frame(report, timing)
    text = render_table(df) + _completions_text(report)
    write_summary(out / "comparison_summary.txt", text, df, csv)
    click.echo(text, nl=False)


def _completions_text(report: ComparisonReport) -> str:
    if not report.completions:
        return ""
    lines = ["", "Completions (greedy):"]
    for item in report.completions:
        lines.append(f"  {item.prompt!r}")
        lines.append(f"    growth:  {item.growth}")
        lines.append(f"    uniform: {item.uniform}")
    return "\n".join(lines) + "\n"


# Diagnostics


@cli.group(cls=LabGroup)
def diag():
    """Layer diagnostics on a trained checkpoint."""


@diag.command("ablate")
@run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--threads", type=int, default=None, help="Worker threads (capped by LAYERANAT_THREADS).")
def ablate_cmd(config_path, seed, corpus_path, eval_path, out_dir, csv, checkpoint, threads):
    """Neighbor-average ablation map with the log-scale chart."""
    out = Path(out_dir)
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    model, eval_set, ckpt_hash = _checkpoint_context(checkpoint, config)
    records = ablation_map(model, eval_set, threads=threads)
    write_jsonl(out / "importance.jsonl", "importance", closure(config, eval_set.hash, ckpt_hash), records)
    chart = render_ascii_importance(records)
    write_summary(out / "importance_chart.txt", chart)
    df = importance_frame(records)
    write_summary(out / "importance_summary.txt", render_table(df), df, csv)
    click.echo(chart, nl=False)


@diag.command("predict")
@run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--component", "components", multiple=True, type=click.Choice(ACTIVE_COMPONENTS))
@click.option("--k", "sample_size", type=int, default=10_000, show_default=True, help="Sampled positions.")
@click.option("--lambda", "ridge_lambda", type=float, default=1.0, show_default=True, help="Ridge penalty.")
@click.option("--replace", "replace_layers", default=None, help="Comma-separated layers to replace by prediction.")
def predict_cmd(
    config_path,
    seed,
    corpus_path,
    eval_path,
    out_dir,
    csv,
    checkpoint,
    components,
    sample_size,
    ridge_lambda,
    replace_layers,
):
    """Ridge predictability of each component from the layers below it."""
    out = Path(out_dir)
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    config = config.model_copy(
        update={"params": {**config.params, "k": sample_size, "lambda": ridge_lambda, "replace": replace_layers}}
    )
    model, eval_set, ckpt_hash = _checkpoint_context(checkpoint, config)
    block = closure(config, eval_set.hash, ckpt_hash)
    records = predictability_table(
        model,
        components or ACTIVE_COMPONENTS,
        k=sample_size,
        ridge_lambda=ridge_lambda,
        seed=stream_seed(config.seed, "ridge-sample"),
    )
    write_jsonl(out / "predictability.jsonl", "predictability", block, records)
    df = predictability_frame(records)
    text = render_table(df)

    layers = parse_layers(replace_layers)
    if layers is not None:
        baseline = perplexity(model, eval_set)
        ppl = predict_and_replace(model, layers, eval_set, ridge_lambda=ridge_lambda)
        result = {
            "layers": list(layers),
            "ppl_baseline": baseline,
            "ppl": ppl,
            "degradation_pct": (ppl / baseline - 1) * 100,
        }
        write_json(out / "replacement.json", "predict-and-replace", block, result)
        text += f"\nReplacing layers {list(layers)}: PPL {baseline:.3f} -> {ppl:.3f}\n"
    write_summary(out / "predictability_summary.txt", text, df, csv)
    click.echo(text, nl=False)


@diag.command("structure")
@run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--component", "components", multiple=True, type=click.Choice(ACTIVE_COMPONENTS))
@click.option("--k-components", type=int, default=5, show_default=True, help="PCA components to report.")
@click.option("--sample", "sample_size", type=int, default=10_000, show_default=True)
def structure_cmd(
    config_path, seed, corpus_path, eval_path, out_dir, csv, checkpoint, components, k_components, sample_size
):
    """Cosine similarity, PCA spectrum and delta correlation across layers."""
    out = Path(out_dir)
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    config = config.model_copy(
        update={"params": {**config.params, "k_components": k_components, "sample": sample_size}}
    )
    model, eval_set, ckpt_hash = _checkpoint_context(checkpoint, config)
    block = closure(config, eval_set.hash, ckpt_hash)
    sample_seed = stream_seed(config.seed, "structure")
    components = components or ACTIVE_COMPONENTS
    summaries = [structure_summary(model, c, k_components, sample_size, sample_seed) for c in components]
    deltas = [delta_correlation(model, c, sample_size, sample_seed) for c in components]
    write_jsonl(out / "structure.jsonl", "structure", block, summaries)
    write_jsonl(out / "delta_correlation.jsonl", "delta-correlation", block, deltas)
    lines = ["component  PC1     mean delta rho  (iid reference -0.50)"]
    for summary, delta in zip(summaries, deltas):
        mean = f"{delta.mean:+.3f}" if delta.mean is not None else "undefined"
        lines.append(f"{summary.component:<10} {summary.explained_variance_ratio[0]:.3f}   {mean}")
    text = "\n".join(lines) + "\n"
    write_summary(out / "structure_summary.txt", text)
    click.echo(text, nl=False)


@diag.command("manipulate")
@run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--strategy", type=click.Choice(["zero", "clone", "blend", "lowrank-blend", "scale"]), required=True)
@click.option("--targets", default=None, help="Comma-separated target layers.")
@click.option(
    "--from-importance",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Take targets from an importance map.",
)
@click.option("--category", type=click.Choice([c.value for c in Category]), default="redundant", show_default=True)
@click.option("--alpha", type=float, default=None, help="Scale factor in [0, 1].")
@click.option("--neighbors", type=int, default=4, show_default=True, help="Blend neighbor count.")
@click.option("--sweep", is_flag=True, help="Scale sweep over alpha in 0, .1, .3, .5, .7, .9.")
def manipulate_cmd(
    config_path,
    seed,
    corpus_path,
    eval_path,
    out_dir,
    csv,
    checkpoint,
    strategy,
    targets,
    from_importance,
    category,
    alpha,
    neighbors,
    sweep,
):
    """Replace target layers by a manipulation strategy and measure the damage."""
    out = Path(out_dir)
    layers = parse_layers(targets)
    if layers is None and from_importance:
        layers = tuple(r.layer for r in load_records(from_importance, ImportanceRecord) if r.category.value == category)
    if not layers:
        raise click.UsageError("no target layers: pass --targets or --from-importance with a non-empty category")
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    config = config.model_copy(
        update={
            "params": {
                **config.params,
                "strategy": strategy,
                "targets": list(layers),
                "alpha": alpha,
                "neighbors": neighbors,
                "sweep": sweep,
            }
        }
    )
    model, eval_set, ckpt_hash = _checkpoint_context(checkpoint, config)
    if sweep:
        results = scale_sweep(model, layers, eval_set)
    else:
        spec = ManipulationSpec(strategy=strategy, targets=layers, alpha=alpha, neighbor_count=neighbors)
        results = [manipulate(model, spec, eval_set)]
    write_jsonl(out / "manipulation.jsonl", "manipulation", closure(config, eval_set.hash, ckpt_hash), results)
    df = manipulation_frame(results)
    text = render_table(df)
    write_summary(out / "manipulation_summary.txt", text, df, csv)
    click.echo(text, nl=False)


@diag.command("recover")
@run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--layers", default=None, help="Comma-separated layers (default: a depth-scaled selection).")
@click.option("--noise-scale", type=float, default=0.5, show_default=True)
@click.option("--max-steps", type=int, default=200, show_default=True)
@click.option("--eval-every", type=int, default=10, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--threads", type=int, default=None)
def recover_cmd(
    config_path,
    seed,
    corpus_path,
    eval_path,
    out_dir,
    csv,
    checkpoint,
    layers,
    noise_scale,
    max_steps,
    eval_every,
    lr,
    threads,
):
    """Noise-injection recovery probes, one layer at a time."""
    out = Path(out_dir)
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    model, eval_set, ckpt_hash = _checkpoint_context(checkpoint, config)
    selected = parse_layers(layers) or tuple(default_recovery_layers(model.num_layers))
    config = config.model_copy(
        update={
            "params": {
                **config.params,
                "layers": list(selected),
                "noise_scale": noise_scale,
                "max_steps": max_steps,
                "eval_every": eval_every,
                "lr": lr,
            }
        }
    )
    data = _training_data(config, model)
    start_time = time.time()
    curves = recovery_map(
        model,
        selected,
        data,
        eval_set,
        seed=stream_seed(config.seed, "recovery"),
        threads=threads,
        checkpoint_dir=out / "recovered",
        noise_scale=noise_scale,
        max_steps=max_steps,
        eval_every=eval_every,
        lr=lr,
        clip=config.optimizer.clip,
    )
    logger.info(f"Recovery probes for {len(curves)} layers in {time.time() - start_time:.2f} seconds")
    write_jsonl(out / "recovery.jsonl", "recovery", closure(config, eval_set.hash, ckpt_hash), curves)
    df = recovery_frame(curves)
    text = render_table(df)
    write_summary(out / "recovery_summary.txt", text, df, csv)
    click.echo(text, nl=False)


# Budget and reports


@cli.command("budget")
@run_options
@click.option("--importance", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--recovery", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bmax", type=int, default=200, show_default=True, help="Steps for a slow-critical layer.")
def budget_cmd(config_path, seed, corpus_path, eval_path, out_dir, csv, importance, recovery, bmax):
    """Per-layer training budget from importance and recovery artifacts."""
    out = Path(out_dir)
    config = load_config(config_path, seed=seed, corpus_path=corpus_path, eval_path=eval_path)
    config = config.model_copy(update={"params": {**config.params, "bmax": bmax}})
    imp = read_artifact(importance)
    allocation = allocate_budget(
        load_records(importance, ImportanceRecord), load_records(recovery, RecoveryCurve), bmax
    )
    block = imp.get("closure") or closure(config, None, None)
    block = {**block, "config": config.model_dump(mode="json")}
    write_json(out / "budget.json", "budget", block, allocation)
    df = budget_frame(allocation)
    text = render_table(df) + (
        f"\ntotal-steps: {allocation.total_steps} vs {allocation.uniform_total} uniform "
        f"({allocation.reduction_pct:.0f}% reduction)\n"
    )
    write_summary(out / "budget_summary.txt", text, df, csv)
    click.echo(text, nl=False)


REPORT_RENDERERS = {
    "importance": lambda doc, path: render_ascii_importance(_records(doc, ImportanceRecord))
    + "\n"
    + render_table(importance_frame(_records(doc, ImportanceRecord))),
    "predictability": lambda doc, path: render_table(predictability_frame(_records(doc, PredictabilityRecord))),
    "recovery": lambda doc, path: render_table(recovery_frame(_records(doc, RecoveryCurve))),
    "manipulation": lambda doc, path: render_table(manipulation_frame(_records(doc, ManipulationResult))),
    "budget": lambda doc, path: render_table(budget_frame(BudgetAllocation.model_validate(doc["result"]))),
    "comparison": lambda doc, path: render_table(
        comparison_frame(
            ComparisonReport.model_validate(
                {**doc["result"], "growth_time": 0.0, "uniform_time": 0.0, "time_saved_pct": None}
            ),
            read_timing(path),
        )
    ),
}


def _records(doc: dict, model_cls):
    return [model_cls.model_validate(item) for item in doc["result"]]


@cli.command("report")
@click.argument("artifacts", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def report_cmd(artifacts):
    """Re-render text summaries from existing artifacts."""
    for path in artifacts:
        doc = read_artifact(path)
        renderer = REPORT_RENDERERS.get(doc["kind"])
        if renderer is None:
            raise ValueError(f"{path}: no text rendering for artifact kind {doc['kind']!r}")
        click.echo(f"== {path} ({doc['kind']}) ==")
        click.echo(renderer(doc, Path(path)), nl=False)


def main(argv=None) -> int:
    return cli.main(args=argv, prog_name="layeranat", standalone_mode=False)


if __name__ == "__main__":
    sys.exit(main())
