"""
fedcov command line

Generate synthetic multi-center data, run the federated pipeline over it
(in one process or as separate coordinator / center-agent processes sharing
an exchange directory), compare with the centralized computation and write
plot-ready CSVs.

Usage:
    python main.py synth --seed 7 --centers 4 --out data/
    python main.py run --data data/ --admm-iterations 10 --out results/
    python main.py compare results/
    python main.py report results-c2/ results-c10/ --out report/
    python main.py folds --center-counts 2,10 --folds 20 --out folds/

    python main.py coordinator --data data/ --exchange xchg/ --out results/
    python main.py center-agent --data data/ --center-id center-000 --exchange xchg/

Log verbosity comes from the FEDCOV_LOG environment variable (default WARNING).
"""

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from audit import audit_result
from config import (
    build_pipeline_config,
    build_synth_spec,
    config_hash,
    load_settings,
    normalize_key,
)
from constants import COORDINATOR_ID, LOG_ENV_VAR
from exceptions import (
    ConfigError,
    EmptyCenter,
    FedcovError,
    NoCenters,
    PhaseTimeout,
    ShapeMismatch,
    SpecError,
)
from federation import (
    AnalysisResult,
    CenterNode,
    CoordinatorNode,
    PipelineConfig,
    default_center_ids,
    expected_message_count,
    run_node,
    run_pipeline,
)
from oracle import compare
from reporting import (
    DatasetManifest,
    ResultManifest,
    load_center,
    load_dataset,
    load_manifest,
    load_truth,
    mse_series,
    oracle_for_results,
    pc_scatter_frame,
    projections_frame,
    truth_on_standardized_scale,
    write_comparison,
    write_csv,
    write_dataset,
    write_results,
)
from synthdata import fold_runner, generate, standardize_weights
from transports import FileExchangeTransport, InProcessTransport

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_AUDIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_TIMEOUT = 3
EXIT_ERROR = 4

INPUT_ERRORS = (ConfigError, SpecError, ShapeMismatch, EmptyCenter, NoCenters)

# argparse dests that feed load_settings
SETTING_FLAGS = [
    "seed",
    "centers",
    "features",
    "subjects",
    "covariates",
    "noise_frac",
    "folds",
    "groups",
    "rho",
    "admm_iterations",
    "tolerance",
    "adaptive_rho",
    "variance_threshold",
    "global_variance_threshold",
    "m_components",
    "covariate_spec",
    "share_scores",
    "transport",
    "out",
    "data",
    "exchange",
    "timeout",
    "center_counts",
    "workers",
]


def configure_logging() -> None:
    level_name = os.environ.get(LOG_ENV_VAR, "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _add_setting_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--centers", type=int, help="Number of centers (C)")
    parser.add_argument("--features", type=int, help="Features per subject (F)")
    parser.add_argument("--subjects", type=int, help="Subjects in total (N)")
    parser.add_argument("--covariates", type=int, help="Covariate columns (q)")
    parser.add_argument("--noise-frac", type=float)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--groups", type=int, help="Labelled subject groups in synthetic data")
    parser.add_argument("--rho", type=float, help="ADMM penalty")
    parser.add_argument("--admm-iterations", type=int)
    parser.add_argument("--tolerance", type=float, help="Stop ADMM once max ||W_c - W~|| is below this")
    parser.add_argument("--adaptive-rho", action="store_true", default=None)
    parser.add_argument("--variance-threshold", type=float, help="Variance share each center keeps")
    parser.add_argument("--global-variance-threshold", type=float)
    parser.add_argument("--m-components", type=int)
    parser.add_argument("--covariate-spec", help="Comma-separated terms, e.g. intercept,age,age^2,sex")
    parser.add_argument("--share-scores", action="store_true", default=None)
    parser.add_argument("--transport", choices=["inproc", "file"])
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--data", help="Dataset directory")
    parser.add_argument("--exchange", help="Shared exchange directory for file transport")
    parser.add_argument("--timeout", type=float, help="Seconds a node waits for a phase")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcov",
        description="Federated standardization, confound correction and PCA",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a synthetic multi-center dataset")
    run = commands.add_parser("run", help="Run the federated pipeline on a dataset")
    folds = commands.add_parser("folds", help="Repeat synth + run over folds and center counts")
    coordinator = commands.add_parser("coordinator", help="Run the coordinator over an exchange directory")
    agent = commands.add_parser("center-agent", help="Run one center over an exchange directory")
    for sub in (synth, run, folds, coordinator, agent):
        _add_setting_flags(sub)

    folds.add_argument("--center-counts", help="Comma-separated center counts, e.g. 2,10,50,100")
    folds.add_argument("--workers", type=int, help="Folds run concurrently")
    agent.add_argument("--center-id", required=True)

    comparison = commands.add_parser("compare", help="Compare a result with the centralized oracle")
    comparison.add_argument("results", help="Results directory written by run")
    comparison.add_argument("--m-components", type=int, help="Components compared (default 4)")

    report = commands.add_parser("report", help="Write plot-ready CSVs from results directories")
    report.add_argument("results", nargs="+", help="Results directories written by run")
    report.add_argument("--out", required=True, help="Report directory")
    report.add_argument("--m-components", type=int, help="Components in the scatter and projections")
    return parser


def _settings(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        normalize_key(flag): getattr(args, flag) for flag in SETTING_FLAGS if hasattr(args, flag)
    }
    return load_settings(getattr(args, "config", None), overrides)


def _require(settings: Dict[str, Any], key: str) -> str:
    if not settings.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return str(settings[key])


def _int_list(value) -> List[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(part) for part in str(value).split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got '{value}'") from e


def _seed(manifest: DatasetManifest, settings: Dict[str, Any]) -> Optional[int]:
    if manifest.synth is not None:
        return manifest.synth.seed
    return int(settings["seed"]) if settings.get("seed") is not None else None


def _print_banner(title: str) -> None:
    print(f"\n{title}")
    print("=" * 50)


def _finish_run(
    result: AnalysisResult,
    config: PipelineConfig,
    manifest: DatasetManifest,
    settings: Dict[str, Any],
    data_dir: str,
    out_dir: str,
    transport: str,
    w_true=None,
) -> int:
    n_covariates = len(config.covariate_spec) or manifest.n_covariates
    audit = audit_result(result, n_covariates, config.score_column_cap)
    sha = config_hash(*[model for model in (config, manifest.synth) if model is not None])
    result_manifest = ResultManifest(
        dataset=str(Path(data_dir).resolve()),
        transport=transport,
        seed=_seed(manifest, settings),
        pipeline=config,
        config_sha256=sha,
        result_sha256=result.digest(),
        transcript_sha256=result.transcript_digest(),
        n_centers=len(result.center_sizes),
        n_features=result.global_stats.n_features,
        n_covariates=n_covariates,
        admm_rounds=result.admm_rounds,
        n_components=result.basis.n_components,
        messages=len(result.transcript),
        audit_passed=audit.passed,
    )
    w_truth = None
    if w_true is not None:
        w_truth = standardize_weights(w_true, result.global_stats, manifest.intercept)
    write_results(result, audit, out_dir, result_manifest, w_truth)

    _print_banner("fedcov run")
    print(f"Centers:        {result_manifest.n_centers}")
    print(f"ADMM rounds:    {result.admm_rounds}")
    if result.trace:
        last = result.trace[-1]
        print(f"Final residual: {last.max_primal_residual:.3e}")
        if last.mse_vs_truth is not None:
            print(f"Final MSE(W):   {last.mse_vs_truth:.3e}")
    print(f"Components:     {result.basis.n_components}")
    print(f"Messages:       {result_manifest.messages}")
    print(f"Result sha256:  {result_manifest.result_sha256}")
    print(f"Audit:          {'passed' if audit.passed else 'FAILED'}")
    for violation in audit.violations:
        print(f"  {violation}")
    print(f"Results:        {out_dir}")
    return EXIT_OK if audit.passed else EXIT_AUDIT_FAILED


def cmd_synth(args: argparse.Namespace) -> int:
    settings = _settings(args)
    out = _require(settings, "out")
    spec = build_synth_spec(settings)
    dataset = generate(spec)
    manifest = write_dataset(dataset, out, default_center_ids(spec.n_centers))

    _print_banner("fedcov synth")
    print(f"Seed:         {spec.seed}")
    print(f"Subjects:     {spec.n_total} in {spec.n_centers} centers")
    print(f"Features:     {spec.n_features}, covariates: {spec.q}")
    print(f"Noise sigma:  {dataset.noise_sigma:.6g}")
    for center_id in manifest.center_ids:
        print(f"  {center_id:<16} {manifest.n_subjects[center_id]} subjects")
    print(f"Dataset:      {out}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    settings = _settings(args)
    data_dir = _require(settings, "data")
    out = _require(settings, "out")
    config = build_pipeline_config(settings)
    manifest, centers, w_true = load_dataset(data_dir)

    transport_name = settings.get("transport") or "inproc"
    if transport_name == "file":
        exchange = Path(settings.get("exchange") or Path(out) / "exchange")
        if not settings.get("exchange") and exchange.exists():
            shutil.rmtree(exchange)
        transport = FileExchangeTransport(exchange)
    elif transport_name == "inproc":
        transport = InProcessTransport()
    else:
        raise ConfigError(f"unknown transport '{transport_name}'")

    result = run_pipeline(
        centers,
        config,
        transport=transport,
        center_ids=manifest.center_ids,
        w_truth=truth_on_standardized_scale(manifest, w_true),
    )
    expected = expected_message_count(len(centers), result.admm_rounds, config.share_scores)
    if len(result.transcript) != expected:
        logger.warning("transcript has %d messages, expected %d", len(result.transcript), expected)
    return _finish_run(result, config, manifest, settings, data_dir, out, transport_name, w_true)


def cmd_coordinator(args: argparse.Namespace) -> int:
    settings = _settings(args)
    data_dir = _require(settings, "data")
    exchange = _require(settings, "exchange")
    out = _require(settings, "out")
    config = build_pipeline_config(settings)
    # only the manifest and ground truth are read, never center rows
    manifest = load_manifest(data_dir)
    w_true = load_truth(data_dir)

    node = CoordinatorNode(manifest.center_ids, config, truth_on_standardized_scale(manifest, w_true))
    transport = FileExchangeTransport(exchange, COORDINATOR_ID)
    transcript = run_node(node, transport, timeout=float(settings.get("timeout") or 600.0))
    result = node.result(transcript)
    return _finish_run(result, config, manifest, settings, data_dir, out, "file", w_true)


def cmd_center_agent(args: argparse.Namespace) -> int:
    settings = _settings(args)
    data_dir = _require(settings, "data")
    exchange = _require(settings, "exchange")
    config = build_pipeline_config(settings)
    center_id = args.center_id
    if center_id not in load_manifest(data_dir).center_ids:
        raise ConfigError(f"center '{center_id}' is not in the dataset manifest")

    node = CenterNode(center_id, load_center(data_dir, center_id), config)
    transport = FileExchangeTransport(exchange, center_id)
    transcript = run_node(node, transport, timeout=float(settings.get("timeout") or 600.0))
    print(f"{center_id}: done after {len(transcript)} messages")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    m = args.m_components or 4
    result, manifest, centralized = oracle_for_results(args.results, m)
    report = compare(result, centralized, m)
    write_comparison(report, args.results, manifest.config_sha256, manifest.seed)

    _print_banner("fedcov compare")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = args.m_components or 4

    series = mse_series(args.results)
    scatters, projections = [], []
    first = None
    for results_dir in args.results:
        result, manifest, centralized = oracle_for_results(results_dir, m)
        first = first or manifest
        scatter = pc_scatter_frame(result.basis.components[:, :m], centralized)
        scatter.insert(0, "C", manifest.n_centers)
        scatter.insert(0, "run", Path(results_dir).name)
        scatters.append(scatter)
        projection = projections_frame(results_dir, m)
        projection.insert(0, "run", Path(results_dir).name)
        projections.append(projection)

    sha, seed = first.config_sha256, first.seed
    write_csv(series, out / "mse_vs_iteration.csv", sha, seed)
    write_csv(pd.concat(scatters, ignore_index=True), out / "pc_scatter.csv", sha, seed)
    write_csv(pd.concat(projections, ignore_index=True), out / "projections.csv", sha, seed)

    _print_banner("fedcov report")
    print(f"Runs:    {len(args.results)} (C = {sorted(set(series['C']))})")
    print(f"Report:  {out}")
    return EXIT_OK


def cmd_folds(args: argparse.Namespace) -> int:
    settings = _settings(args)
    out = Path(_require(settings, "out"))
    spec = build_synth_spec(settings)
    config = build_pipeline_config(settings)
    counts = _int_list(settings["center_counts"]) if settings.get("center_counts") else [spec.n_centers]
    workers = int(settings.get("workers") or 1)

    summary = fold_runner(spec, config, counts, max_workers=workers)
    out.mkdir(parents=True, exist_ok=True)
    sha = config_hash(spec, config)
    write_csv(summary.rows, out / "fold_summary.csv", sha, spec.seed)
    write_csv(summary.mse_by_iteration(), out / "mse_vs_iteration.csv", sha, spec.seed)
    write_csv(summary.cosine_summary(), out / "pc_cosines.csv", sha, spec.seed)

    _print_banner("fedcov folds")
    print(f"Folds:   {spec.folds}, center counts {counts}")
    for c, mse in summary.final_mse().items():
        print(f"  C={c:<6} mean final MSE(W) {mse:.3e}")
    print(f"MSE decreasing over first 5 rounds: {summary.monotone_fraction():.1%} of runs")
    print(f"Summary: {out / 'fold_summary.csv'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "run": cmd_run,
    "compare": cmd_compare,
    "report": cmd_report,
    "folds": cmd_folds,
    "coordinator": cmd_coordinator,
    "center-agent": cmd_center_agent,
}


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except PhaseTimeout as e:
        print(f"error: phase '{e.phase}' timed out; missing: {', '.join(e.missing)}", file=sys.stderr)
        return EXIT_TIMEOUT
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FedcovError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
