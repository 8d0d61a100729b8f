"""Experiment execution and reporting on top of the scenario runners.

Cells are (scenario, method, dataset, seed) units, dispatched to an
optional worker pool. Outputs are written once, sorted, so bytes never
depend on worker count or completion order.
"""

import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .config import (
    ExperimentConfig,
    dataset_display_name,
    materialize_datasets,
    parse_config_text,
    serialize_config,
)
from .errors import EvaluationError
from .evaluation import MetricTable, ZERO_SHOT_METHOD, aggregate_runs, run_cell

RESULTS_CSV = "results.csv"
RESULTS_JSON = "results.json"
CURVES_JSONL = "curves.jsonl"
FAILURES_JSON = "failures.json"
BASELINE_METHOD = "promptfl"


@dataclass(frozen=True)
class Cell:
    scenario: str
    method: str
    dataset: str
    seed: int


@dataclass
class RunResult:
    exit_code: int
    table: MetricTable
    output_dir: Path
    failures: list[dict]


def plan_cells(config: ExperimentConfig, seed_offset: int = 0) -> list[Cell]:
    seeds = [s + seed_offset for s in config.seeds]
    return [
        Cell(scenario, method, dataset_display_name(dataset), seed)
        for scenario in config.scenarios
        for method in config.methods
        for dataset in config.data.datasets
        for seed in seeds
    ]


def _execute_cell(args: tuple[str, str, str, str, int]) -> tuple[dict, list, list, str | None]:
    """Worker entry point; takes only picklable primitives."""
    config_text, scenario, method, dataset, seed = args
    cell_key = {"scenario": scenario, "method": method, "dataset": dataset, "seed": seed}
    try:
        config = parse_config_text(config_text)
        datasets = materialize_datasets(config)
        master = datasets[dataset]
        spec = config.scenario_spec(scenario)
        result = run_cell(spec, method, dataset, master, seed, config.plan())
        observations = [
            (o.scenario, o.method, o.dataset, o.seed, o.metric, o.value)
            for o in result.observations
        ]
        return cell_key, observations, result.curves, None
    except Exception:  # noqa: BLE001 - cell failures become a manifest entry
        return cell_key, [], [], traceback.format_exc()


def resolve_output_dir(config: ExperimentConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get("FEDPROMPT_OUT")
    return Path(env) if env else Path(config.output_dir)


def run(config: ExperimentConfig, jobs: int = 1, dry_run: bool = False,
        seed_offset: int = 0, output_dir: str | None = None) -> RunResult:
    """Execute every cell, then write results.csv/results.json/curves.jsonl."""
    out_dir = resolve_output_dir(config, output_dir)
    cells = plan_cells(config, seed_offset)
    if dry_run:
        print(f"would execute {len(cells)} cells:")
        for cell in cells:
            print(f"  {cell.scenario} / {cell.method} / {cell.dataset} / seed {cell.seed}")
        print(f"would write results under {out_dir}")
        return RunResult(exit_code=0, table=MetricTable(), output_dir=out_dir, failures=[])

    config_text = serialize_config(config)
    if seed_offset:
        config_text = serialize_config(replace(config, seeds=[s + seed_offset for s in config.seeds]))
    work = [(config_text, c.scenario, c.method, c.dataset, c.seed) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_execute_cell, work))
    else:
        outcomes = [_execute_cell(item) for item in work]

    table = MetricTable()
    curves: list[dict] = []
    failures: list[dict] = []
    for cell_key, observations, cell_curves, error in outcomes:
        if error is not None:
            failures.append({"cell": cell_key, "error": error})
            continue
        for scenario, method, dataset, seed, metric, value in observations:
            table.add(scenario, method, dataset, seed, metric, value)
        curves.extend(cell_curves)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_results_csv(out_dir / RESULTS_CSV, table)
    _write_results_json(out_dir / RESULTS_JSON, table)
    _write_curves(out_dir / CURVES_JSONL, curves)
    if failures:
        with open(out_dir / FAILURES_JSON, "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
    return RunResult(exit_code=1 if failures else 0, table=table,
                     output_dir=out_dir, failures=failures)


def _write_results_csv(path: Path, table: MetricTable) -> None:
    lines = ["scenario,method,dataset,seed,metric,value"]
    for o in table.sorted_observations():
        lines.append(f"{o.scenario},{o.method},{o.dataset},{o.seed},{o.metric},{o.value!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_results_json(path: Path, table: MetricTable) -> None:
    tree: dict = {}
    for o in table.sorted_observations():
        entry = (
            tree.setdefault(o.scenario, {})
            .setdefault(o.method, {})
            .setdefault(o.dataset, {})
            .setdefault(o.metric, {"values": {}})
        )
        entry["values"][str(o.seed)] = o.value
    for scenario in tree.values():
        for method in scenario.values():
            for dataset in method.values():
                for metric in dataset.values():
                    mean, std = aggregate_runs(metric["values"].values())
                    metric["mean"] = mean
                    metric["std"] = std
                    metric["n_runs"] = len(metric["values"])
    path.write_text(json.dumps(tree, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_curves(path: Path, curves: list[dict]) -> None:
    ordered = sorted(
        curves,
        key=lambda r: (r["scenario"], r["method"], r["dataset"], r["seed"], r["round"]),
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in ordered:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def load_results_csv(path: Path) -> MetricTable:
    table = MetricTable()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "scenario,method,dataset,seed,metric,value":
        raise EvaluationError(f"{path}: not a results.csv file")
    for line in lines[1:]:
        if not line.strip():
            continue
        scenario, method, dataset, seed, metric, value = line.split(",", 5)
        table.add(scenario, method, dataset, int(seed), metric, float(value))
    return table


def _grid_lines(table: MetricTable, scenario: str, metric: str) -> list[str]:
    datasets = sorted({o.dataset for o in table.observations
                       if o.scenario == scenario and o.metric == metric})
    methods = [m for m in table.methods(scenario)
               if any(o.method == m and o.metric == metric for o in table.observations
                      if o.scenario == scenario)]
    if not datasets or not methods:
        return []
    is_cost = metric.startswith("chi")

    def fmt(mean, std):
        return f"{mean:.4g}±{std:.2g}" if is_cost else f"{mean:.1f}±{std:.1f}"

    baseline_means = None
    if BASELINE_METHOD in methods and len(methods) > 1 and not is_cost:
        try:
            baseline_means = {
                d: table.cell(scenario, BASELINE_METHOD, d, metric)[0] for d in datasets
            }
        except EvaluationError:
            baseline_means = None
    header = ["method"] + datasets
    if baseline_means is not None:
        header.append("#")
    lines = [",".join(header)]
    for method in methods:
        row = [method]
        means = {}
        complete = True
        for dataset in datasets:
            try:
                mean, std, _ = table.cell(scenario, method, dataset, metric)
                row.append(fmt(mean, std))
                means[dataset] = mean
            except EvaluationError:
                row.append("")
                complete = False
        if baseline_means is not None:
            if method in (BASELINE_METHOD, ZERO_SHOT_METHOD) or not complete:
                row.append("-")
            else:
                count = sum(1 for d in datasets if means[d] > baseline_means[d])
                row.append(str(count))
        lines.append(",".join(row))
    return lines


def report(results_dir: str) -> str:
    """Write per-scenario comparison grids and cost-curve files; return a summary."""
    results_dir = Path(results_dir)
    table = load_results_csv(results_dir / RESULTS_CSV)
    chunks: list[str] = []
    scenarios = sorted({o.scenario for o in table.observations})
    for scenario in scenarios:
        for metric in table.metrics(scenario):
            if scenario == "cost_tradeoff" and metric == "chi_millions":
                continue
            lines = _grid_lines(table, scenario, metric)
            if not lines:
                continue
            if (len(lines) > 1 and not lines[0].endswith(",#")
                    and not metric.startswith("chi") and len(table.methods(scenario)) > 1):
                chunks.append(f"[{scenario}/{metric}] baseline '{BASELINE_METHOD}' missing; "
                              "superiority column omitted")
            out = results_dir / f"report_{scenario}_{metric}.csv"
            out.write_text("\n".join(lines) + "\n", encoding="utf-8")
            chunks.append(f"# {scenario} / {metric}")
            chunks.extend(lines)
            chunks.append("")
    _write_cost_curves(table, results_dir, chunks)
    text = "\n".join(chunks)
    return text


def _write_cost_curves(table: MetricTable, results_dir: Path, chunks: list[str]) -> None:
    scenario = "cost_tradeoff"
    methods = table.methods(scenario)
    for method in methods:
        points = []
        for dataset in table.datasets(scenario):
            try:
                chi = table.cell(scenario, method, dataset, "chi_millions")[0]
                acc = table.cell(scenario, method, dataset, "alpha_g")[0]
            except EvaluationError:
                continue
            points.append((chi, acc, dataset))
        if not points:
            continue
        points.sort()
        out = results_dir / f"costcurve_{method}.csv"
        lines = ["params_millions,accuracy,dataset"]
        lines += [f"{chi!r},{acc!r},{dataset}" for chi, acc, dataset in points]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        chunks.append(f"wrote {out.name} ({len(points)} sweep points)")
