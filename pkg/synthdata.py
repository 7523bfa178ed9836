"""
Module: synthdata.py
Synthetic linear-confound data with retained ground truth, and the fold runner
that repeats generate-and-run experiments over several center counts.

X = Y·W + ε with Y, W standard normal and ε ~ N(0, σ²), where σ is
`noise_frac` times the root-mean-square entry of Y·W. Rows are split
contiguously into equal centers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from exceptions import SpecError
from federation import PipelineConfig, default_center_ids, run_pipeline
from oracle import centralized_pipeline, compare
from stats_core import CenterData, GlobalStats

logger = logging.getLogger(__name__)

FOLD_COLUMNS = ["fold", "C", "iteration", "mse_w", "pc_index", "cosine_similarity"]
COMPARED_COMPONENTS = 4


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(0, ge=0, lt=2**64)
    n_total: int = Field(2400, ge=1)
    n_features: int = Field(500, ge=1)
    q: int = Field(20, ge=1, description="Covariate columns, intercept included")
    n_centers: int = Field(4, ge=1)
    noise_frac: float = Field(0.2, ge=0)
    folds: int = Field(20, ge=1)
    intercept: bool = True
    n_groups: int = Field(0, ge=0, description="Labelled subject groups with a feature offset each")
    group_effect: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _equal_splits(self):
        if self.n_total % self.n_centers:
            raise ValueError(
                f"n_total={self.n_total} does not split into {self.n_centers} equal centers"
            )
        return self


def build_spec(**values) -> SynthSpec:
    try:
        return SynthSpec(**values)
    except ValidationError as exc:
        raise SpecError(str(exc)) from exc


def standardize_weights(w: np.ndarray, stats: GlobalStats, intercept: bool) -> np.ndarray:
    """
    Map generating weights onto the scale of standardized features. With an
    intercept column in Y, row 0 also absorbs the feature means.
    """
    varying = stats.std > 0
    scale = np.where(varying, stats.std, 1.0)
    scaled = w / scale
    if intercept:
        scaled[0] = (w[0] - stats.mean) / scale
    scaled[:, ~varying] = 0.0
    return scaled


@dataclass
class SynthDataset:
    spec: SynthSpec
    centers: List[CenterData]
    w_true: np.ndarray
    x_norm: float
    noise_sigma: float

    def pooled(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.vstack([c.x for c in self.centers]), np.vstack([c.y for c in self.centers])

    def standardized_truth(self, stats: GlobalStats) -> np.ndarray:
        return standardize_weights(self.w_true, stats, self.spec.intercept)


def generate(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    n, f, q = spec.n_total, spec.n_features, spec.q

    y = rng.standard_normal((n, q))
    if spec.intercept:
        y[:, 0] = 1.0
    w = rng.standard_normal((q, f))
    signal = y @ w
    sigma = spec.noise_frac * np.linalg.norm(signal) / np.sqrt(n * f)
    x = signal + sigma * rng.standard_normal((n, f))

    labels = None
    if spec.n_groups:
        groups = rng.integers(spec.n_groups, size=n)
        offsets = spec.group_effect * rng.standard_normal((spec.n_groups, f))
        x = x + offsets[groups]
        labels = np.array([f"group-{g}" for g in groups])

    size = n // spec.n_centers
    centers = [
        CenterData(
            x[start : start + size],
            y[start : start + size],
            labels=None if labels is None else tuple(labels[start : start + size]),
        )
        for start in range(0, n, size)
    ]
    return SynthDataset(spec, centers, w, float(np.linalg.norm(x)), float(sigma))


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class FoldSummary:
    rows: pd.DataFrame

    def mse_by_iteration(self) -> pd.DataFrame:
        """Mean and sd of MSE(W, W̃) per center count and iteration."""
        mse = self.rows.dropna(subset=["iteration"])
        return mse.groupby(["C", "iteration"])["mse_w"].agg(["mean", "std"]).reset_index()

    def final_mse(self) -> pd.Series:
        """Mean MSE at the last iteration, per center count."""
        mse = self.rows.dropna(subset=["iteration"])
        last = mse.loc[mse.groupby(["fold", "C"])["iteration"].idxmax()]
        return last.groupby("C")["mse_w"].mean()

    def cosine_summary(self) -> pd.DataFrame:
        cosines = self.rows.dropna(subset=["pc_index"])
        return cosines.groupby(["C", "pc_index"])["cosine_similarity"].agg(["mean", "std"]).reset_index()

    def monotone_fraction(self, iterations: int = 5) -> float:
        """Share of (fold, C) runs whose MSE decreases over the first `iterations` rounds."""
        mse = self.rows.dropna(subset=["iteration"])
        mse = mse[mse["iteration"] <= iterations].sort_values(["fold", "C", "iteration"])
        decreasing = mse.groupby(["fold", "C"])["mse_w"].apply(
            lambda series: bool(np.all(np.diff(series.to_numpy()) < 0))
        )
        return float(decreasing.mean())


def run_fold(spec: SynthSpec, config: PipelineConfig, fold: int, n_centers: int) -> List[dict]:
    fold_spec = build_spec(**{**spec.model_dump(), "seed": fold_seed(spec.seed, fold), "n_centers": n_centers})
    dataset = generate(fold_spec)
    m = config.m_components or COMPARED_COMPONENTS
    if config.m_components is None:
        config = config.model_copy(update={"m_components": m})
    result = run_pipeline(
        dataset.centers,
        config,
        center_ids=default_center_ids(n_centers),
        w_truth=dataset.standardized_truth,
    )
    centralized = centralized_pipeline(dataset.centers, m=m)
    report = compare(result, centralized, m)

    rows = [
        {"fold": fold, "C": n_centers, "iteration": d.iteration, "mse_w": d.mse_vs_truth}
        for d in result.trace
    ]
    rows += [
        {"fold": fold, "C": n_centers, "pc_index": j + 1, "cosine_similarity": float(cos)}
        for j, cos in enumerate(report.pc_cosines)
    ]
    logger.info(
        "fold %d, C=%d: final mse %.3e, first cosine %.6f",
        fold,
        n_centers,
        result.trace[-1].mse_vs_truth,
        report.pc_cosines[0] if report.pc_cosines.size else float("nan"),
    )
    return rows


def fold_runner(
    spec: SynthSpec,
    config: PipelineConfig,
    center_counts: Optional[Sequence[int]] = None,
    max_workers: int = 1,
) -> FoldSummary:
    """Repeat generate + run_pipeline for every fold and center count."""
    counts = list(center_counts) if center_counts else [spec.n_centers]
    tasks = [(fold, c) for fold in range(spec.folds) for c in counts]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            chunks = list(pool.map(lambda task: run_fold(spec, config, *task), tasks))
    else:
        chunks = [run_fold(spec, config, *task) for task in tasks]
    rows = [row for chunk in chunks for row in chunk]
    frame = pd.DataFrame(rows, columns=FOLD_COLUMNS)
    return FoldSummary(frame)
