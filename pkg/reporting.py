"""
Module: reporting.py
On-disk layout of datasets and results, and the plot-ready CSV reports.

Dataset directory:
    manifest.json            DatasetManifest
    w_true.npy               generating weights (synthetic data only)
    <center>/x.npy           raw features
    <center>/y.npy           covariates
    <center>/labels.txt      optional, one group label per subject
    <center>/covariates.csv  optional covariate table for covariate_spec

Results directory:
    result.json, global_stats.bin, w_tilde.bin, global_basis.bin,
    admm_trace.csv, scores.csv, loadings.csv, w_column.csv,
    transcript.bin, audit.txt
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from audit import AuditReport
from confound_admm import ConsensusWeights
from exceptions import ConfigError
from federation import AnalysisResult, PipelineConfig, center_covariates
from fpca import GlobalBasis
from oracle import CentralizedResult, ComparisonReport, centralized_pipeline
from stats_core import CenterData, GlobalStats
from synthdata import SynthDataset, SynthSpec, standardize_weights

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RESULT = "result.json"


class DatasetManifest(BaseModel):
    center_ids: List[str]
    n_features: int
    n_covariates: int
    n_subjects: Dict[str, int]
    intercept: bool = False
    has_truth: bool = False
    synth: Optional[SynthSpec] = None


class ResultManifest(BaseModel):
    dataset: str
    transport: str
    seed: Optional[int] = None
    pipeline: PipelineConfig
    config_sha256: str
    result_sha256: str
    transcript_sha256: str
    n_centers: int
    n_features: int
    n_covariates: int
    admm_rounds: int
    n_components: int
    messages: int
    audit_passed: bool


def _load_model(model, path: Path):
    try:
        return model.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid {path.name}: {e}") from e


def write_dataset(dataset: SynthDataset, out_dir, center_ids: Sequence[str]) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for center_id, center in zip(center_ids, dataset.centers):
        directory = out / center_id
        directory.mkdir(exist_ok=True)
        np.save(directory / "x.npy", center.x)
        np.save(directory / "y.npy", center.y)
        if center.labels is not None:
            (directory / "labels.txt").write_text("\n".join(center.labels) + "\n", encoding="utf-8")
    np.save(out / "w_true.npy", dataset.w_true)

    manifest = DatasetManifest(
        center_ids=list(center_ids),
        n_features=dataset.spec.n_features,
        n_covariates=dataset.spec.q,
        n_subjects={cid: c.n_subjects for cid, c in zip(center_ids, dataset.centers)},
        intercept=dataset.spec.intercept,
        has_truth=True,
        synth=dataset.spec,
    )
    (out / MANIFEST).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("wrote dataset with %d centers to %s", len(center_ids), out)
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    return _load_model(DatasetManifest, Path(data_dir) / MANIFEST)


def load_center(data_dir, center_id: str) -> CenterData:
    """Load one center's rows, and nothing else."""
    directory = Path(data_dir) / center_id
    try:
        x = np.load(directory / "x.npy")
        y = np.load(directory / "y.npy")
    except OSError as e:
        raise ConfigError(f"center '{center_id}' has no data under {directory}: {e}") from e
    labels_file = directory / "labels.txt"
    labels = labels_file.read_text(encoding="utf-8").splitlines() if labels_file.exists() else None
    table_file = directory / "covariates.csv"
    table = None
    if table_file.exists():
        table = {name: column.to_numpy() for name, column in pd.read_csv(table_file).items()}
    return CenterData(x, y, labels=labels, covariate_table=table)


def load_truth(data_dir) -> Optional[np.ndarray]:
    path = Path(data_dir) / "w_true.npy"
    return np.load(path) if path.exists() else None


def load_dataset(data_dir) -> Tuple[DatasetManifest, List[CenterData], Optional[np.ndarray]]:
    manifest = load_manifest(data_dir)
    centers = [load_center(data_dir, cid) for cid in manifest.center_ids]
    return manifest, centers, load_truth(data_dir)


def truth_on_standardized_scale(manifest: DatasetManifest, w_true: Optional[np.ndarray]):
    """Ground truth as a function of the global stats, or None without truth."""
    if w_true is None:
        return None
    return lambda stats: standardize_weights(w_true, stats, manifest.intercept)


def write_csv(frame: pd.DataFrame, path, config_sha256: str, seed: Optional[int]) -> Path:
    """CSV with a provenance comment line ahead of the header row."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# config_sha256={config_sha256}, seed={'' if seed is None else seed}\n")
        frame.to_csv(handle, index=False)
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def read_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing input {path}")
    return pd.read_csv(path, comment="#")


def trace_frame(result: AnalysisResult) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "iteration": d.iteration,
                "max_primal_residual": d.max_primal_residual,
                "mse_w": d.mse_vs_truth,
                "rho": d.rho,
            }
            for d in result.trace
        ],
        columns=["iteration", "max_primal_residual", "mse_w", "rho"],
    )


def scores_frame(result: AnalysisResult) -> pd.DataFrame:
    owners, coords, labels = result.pooled_scores()
    frame = pd.DataFrame(coords, columns=[f"pc{j + 1}" for j in range(coords.shape[1])])
    frame.insert(0, "label", labels)
    frame.insert(0, "center", owners)
    return frame


def loadings_frame(basis_components: np.ndarray, n_components: int = 4) -> pd.DataFrame:
    """Loadings of the first components, one row per feature."""
    k = min(n_components, basis_components.shape[1])
    frame = pd.DataFrame(basis_components[:, :k], columns=[f"pc{j + 1}" for j in range(k)])
    frame.insert(0, "feature", np.arange(basis_components.shape[0]))
    return frame


def w_column_frame(w_tilde: np.ndarray, w_truth: Optional[np.ndarray], column: int = 0) -> pd.DataFrame:
    """One row of covariate weights across features: estimate vs truth."""
    frame = pd.DataFrame({"feature": np.arange(w_tilde.shape[1]), "w_tilde": w_tilde[column]})
    if w_truth is not None and w_truth.shape == w_tilde.shape:
        frame["w_true"] = w_truth[column]
    return frame


def write_results(
    result: AnalysisResult,
    audit: AuditReport,
    out_dir,
    manifest: ResultManifest,
    w_truth: Optional[np.ndarray] = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sha, seed = manifest.config_sha256, manifest.seed

    (out / "global_stats.bin").write_bytes(result.global_stats.to_bytes())
    (out / "w_tilde.bin").write_bytes(result.w_tilde.to_bytes())
    (out / "global_basis.bin").write_bytes(result.basis.to_bytes())
    (out / "transcript.bin").write_bytes(b"".join(d.data for d in result.transcript))
    (out / "audit.txt").write_text(audit.to_text(), encoding="utf-8")

    write_csv(trace_frame(result), out / "admm_trace.csv", sha, seed)
    write_csv(scores_frame(result), out / "scores.csv", sha, seed)
    write_csv(loadings_frame(result.basis.components), out / "loadings.csv", sha, seed)
    # intercept row carries the feature means; report the first real covariate
    column = 1 if result.w_tilde.w_tilde.shape[0] > 1 else 0
    write_csv(w_column_frame(result.w_tilde.w_tilde, w_truth, column), out / "w_column.csv", sha, seed)

    (out / RESULT).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("wrote results to %s", out)
    return out


def load_result_manifest(results_dir) -> ResultManifest:
    return _load_model(ResultManifest, Path(results_dir) / RESULT)


def load_global_stats(results_dir) -> GlobalStats:
    path = Path(results_dir) / "global_stats.bin"
    if not path.exists():
        raise ConfigError(f"missing input {path}")
    return GlobalStats.from_bytes(path.read_bytes())


def write_comparison(report: ComparisonReport, out_dir, config_sha256: str, seed: Optional[int]) -> None:
    out = Path(out_dir)
    (out / "comparison.txt").write_text(report.to_text(), encoding="utf-8")
    write_csv(pd.DataFrame(report.to_rows()), out / "comparison.csv", config_sha256, seed)


def pc_scatter_frame(federated: np.ndarray, centralized: CentralizedResult) -> pd.DataFrame:
    """PC vs PC* loadings per feature, centralized signs aligned to the federated ones."""
    reference = centralized.basis.components
    k = min(federated.shape[1], reference.shape[1])
    frames = []
    for j in range(k):
        sign = 1.0 if federated[:, j] @ reference[:, j] >= 0 else -1.0
        frames.append(
            pd.DataFrame(
                {
                    "pc_index": j + 1,
                    "feature": np.arange(federated.shape[0]),
                    "loading_centralized": sign * reference[:, j],
                    "loading_federated": federated[:, j],
                }
            )
        )
    if not frames:
        return pd.DataFrame(columns=["pc_index", "feature", "loading_centralized", "loading_federated"])
    return pd.concat(frames, ignore_index=True)


def mse_series(results_dirs: Sequence) -> pd.DataFrame:
    """ADMM traces of several runs stacked, keyed by their center count."""
    frames = []
    for results_dir in results_dirs:
        manifest = load_result_manifest(results_dir)
        trace = read_csv(Path(results_dir) / "admm_trace.csv")
        trace.insert(0, "C", manifest.n_centers)
        trace.insert(0, "run", Path(results_dir).name)
        frames.append(trace)
    if not frames:
        raise ConfigError("no results directories given")
    return pd.concat(frames, ignore_index=True)


def projections_frame(results_dir, n_components: int = 4) -> pd.DataFrame:
    scores = read_csv(Path(results_dir) / "scores.csv")
    keep = ["center", "label"] + [c for c in scores.columns if c.startswith("pc")][:n_components]
    return scores[keep]


def load_result(results_dir) -> Tuple[AnalysisResult, ResultManifest]:
    """The numeric parts of a written result (no trace, scores or transcript)."""
    out = Path(results_dir)
    manifest = load_result_manifest(out)
    try:
        w_tilde = ConsensusWeights.from_bytes((out / "w_tilde.bin").read_bytes())
        basis = GlobalBasis.from_bytes((out / "global_basis.bin").read_bytes())
    except OSError as e:
        raise ConfigError(f"incomplete results in {out}: {e}") from e
    return AnalysisResult(
        global_stats=load_global_stats(out),
        w_tilde=w_tilde,
        trace=[],
        basis=basis,
        center_sizes={},
    ), manifest


def oracle_for_results(results_dir, m: Optional[int] = None):
    """
    Load a written result together with the centralized computation on the
    dataset it came from. Pools every center's rows, so this is an evaluation
    tool, never part of a federated run.
    """
    result, manifest = load_result(results_dir)
    _, centers, _ = load_dataset(manifest.dataset)
    y = np.vstack([center_covariates(center, manifest.pipeline) for center in centers])
    m = m or result.basis.n_components
    centralized = centralized_pipeline(centers, m=m, y=y)
    return result, manifest, centralized
