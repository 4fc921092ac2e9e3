from __future__ import annotations

import asyncio
import functools
import json
import logging
import math
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from .alignment_model import AlignmentFit
from .config import ExperimentConfig
from .methods import (
    MethodResult,
    MethodTag,
    default_net_spec,
    jpo_trial,
    select_learning_rate,
    solve,
)
from .problems import generate
from .schema import (
    AlignmentFitSchema,
    CellDigest,
    FractionRow,
    RunRecord,
    RunRecordSchema,
    SplitRow,
    Stage,
)


LOGGER = logging.getLogger(__name__)

EQUALITY_TOLERANCE = 1e-9
REFERENCE = MethodTag.BFGS
NETWORK_METHODS = frozenset(
    {MethodTag.JPO, MethodTag.SUPERVISED, MethodTag.NEURAL_ADJOINT}
)


@dataclass(frozen=True, order=True)
class Cell:
    n: int
    seed: int
    method: str


@dataclass(frozen=True)
class ImprovementSplit:
    fraction: float
    used: int
    excluded: int


def fraction_better(
    method_losses: npt.ArrayLike,
    reference_losses: npt.ArrayLike,
    tolerance: float = EQUALITY_TOLERANCE,
) -> float:
    """Share of examples where the method beats the reference; ties count half."""
    ours = np.asarray(method_losses, dtype=np.float64)
    theirs = np.asarray(reference_losses, dtype=np.float64)
    if ours.shape != theirs.shape:
        msg = f"Loss lists differ in length: {ours.shape} vs {theirs.shape}"
        raise ValueError(msg)
    if ours.size == 0:
        msg = "Cannot compare empty loss lists"
        raise ValueError(msg)
    ours = np.where(np.isnan(ours), np.inf, ours)
    theirs = np.where(np.isnan(theirs), np.inf, theirs)
    with np.errstate(invalid="ignore"):
        scale = np.maximum(np.abs(ours), np.abs(theirs))
        equal = (ours == theirs) | (np.abs(ours - theirs) <= tolerance * scale)
    better = (ours < theirs) & ~equal
    return (int(better.sum()) + 0.5 * int(equal.sum())) / ours.size


def errorbar(values: Sequence[float], n: int) -> tuple[float, float]:
    """Mean of f over seeds and the spread sqrt(sum (f_k - mean)^2) / N."""
    if not values:
        msg = "Error bars need at least one value"
        raise ValueError(msg)
    f = np.asarray(values, dtype=np.float64)
    mean = float(f.mean())
    return mean, float(np.sqrt(np.sum((f - mean) ** 2)) / n)


def improvement_split(
    network_losses: npt.ArrayLike,
    refined_losses: npt.ArrayLike,
    initial_losses: npt.ArrayLike,
) -> ImprovementSplit:
    """Average share of each example's total loss decrease reached before refinement."""
    network = np.asarray(network_losses, dtype=np.float64)
    refined = np.asarray(refined_losses, dtype=np.float64)
    initial = np.asarray(initial_losses, dtype=np.float64)
    usable = np.isfinite(network) & np.isfinite(initial) & (refined < initial)
    if not usable.any():
        return ImprovementSplit(fraction=math.nan, used=0, excluded=int(network.size))
    share = (initial[usable] - network[usable]) / (initial[usable] - refined[usable])
    return ImprovementSplit(
        fraction=float(np.mean(np.clip(share, 0.0, 1.0))),
        used=int(usable.sum()),
        excluded=int((~usable).sum()),
    )


def _curve(result: MethodResult) -> list[tuple[int, float]]:
    curve = []
    for batch, losses in zip(result.history, result.history_losses, strict=True):
        finite = losses[np.isfinite(losses)]
        mean = float(finite.mean()) if finite.size else math.nan
        curve.append((batch.iteration, mean))
    return curve


def digest_result(result: MethodResult, cell: Cell, family: str) -> CellDigest:
    if result.refinement is not None:
        network = result.refinement.start_losses
    elif result.method in NETWORK_METHODS:
        network = result.best_losses
    else:
        network = result.final_losses
    stages = {
        Stage.INITIAL.value: result.initial_losses.tolist(),
        Stage.NETWORK.value: network.tolist(),
    }
    iterations: list[int] = []
    if result.refinement is not None:
        stages[Stage.REFINED.value] = result.refinement.losses.tolist()
        iterations = [int(i) for i in result.refinement.iterations]
    return CellDigest(
        family=family,
        n=cell.n,
        seed=cell.seed,
        method=cell.method,
        stages=stages,
        curve=_curve(result),
        refine_iterations=iterations,
        warnings=list(result.warnings),
    )


def run_cell(config: ExperimentConfig, cell: Cell) -> CellDigest:
    """Generate the cell's problems and run its method; failures are recorded."""
    method = MethodTag(cell.method)
    try:
        problems = generate(config.family, cell.n, cell.seed).without_ground_truth()
        jpo = config.jpo
        if method == MethodTag.JPO and config.select_learning_rate:
            spec = default_net_spec(config.family)
            rate = select_learning_rate(jpo_trial(problems, spec, jpo, seed=cell.seed))
            LOGGER.info("Cell %s uses learning rate %g", cell, rate)
            optimizer = jpo.optimizer.model_copy(update={"step_size": rate})
            jpo = jpo.model_copy(update={"optimizer": optimizer})
        refine = config.refine and method in NETWORK_METHODS
        result = solve(
            method,
            problems,
            seed=cell.seed,
            jpo=jpo,
            supervised=config.supervised,
            adjoint=config.adjoint,
            bfgs=config.bfgs,
            gd=config.gd,
            refinement=config.refinement if refine else None,
        )
    except Exception as ex:  # noqa: BLE001
        LOGGER.warning("Cell %s failed: %s", cell, ex, exc_info=True)
        return CellDigest(
            family=config.family.value,
            n=cell.n,
            seed=cell.seed,
            method=cell.method,
            error=f"{type(ex).__name__}: {ex}",
        )
    LOGGER.info("Finished cell %s", cell)
    return digest_result(result, cell, config.family.value)


def compute_metrics(
    digests: Sequence[CellDigest],
) -> tuple[tuple[FractionRow, ...], tuple[SplitRow, ...]]:
    """f_N against BFGS per (N, method, stage) and per-cell improvement splits."""
    reference = {
        (d.n, d.seed): d.stages[Stage.NETWORK.value]
        for d in digests
        if d.method == REFERENCE and not d.failed
    }
    grouped: dict[tuple[str, int, str, str], list[float]] = defaultdict(list)
    splits = []
    for d in sorted(digests, key=lambda d: (d.n, d.method, d.seed)):
        if d.failed:
            continue
        if d.method != REFERENCE and (d.n, d.seed) in reference:
            for stage in (Stage.NETWORK.value, Stage.REFINED.value):
                if stage in d.stages:
                    grouped[(d.family, d.n, d.method, stage)].append(
                        fraction_better(d.stages[stage], reference[(d.n, d.seed)])
                    )
        if Stage.REFINED.value in d.stages:
            split = improvement_split(
                d.stages[Stage.NETWORK.value],
                d.stages[Stage.REFINED.value],
                d.stages[Stage.INITIAL.value],
            )
            splits.append(
                SplitRow(
                    family=d.family,
                    n=d.n,
                    seed=d.seed,
                    method=d.method,
                    fraction=split.fraction,
                    excluded=split.excluded,
                )
            )
    fractions = []
    for (family, n, method, stage), values in sorted(grouped.items()):
        mean, bar = errorbar(values, n)
        fractions.append(
            FractionRow(
                family=family,
                n=n,
                method=method,
                stage=stage,
                f_mean=mean,
                f_bar=bar,
                seeds=len(values),
            )
        )
    return tuple(fractions), tuple(splits)


def experiment_cells(config: ExperimentConfig) -> list[Cell]:
    methods = {m.value for m in config.methods} | {REFERENCE.value}
    return sorted(
        Cell(n=n, seed=seed, method=method)
        for n in config.ns
        for seed in config.seeds
        for method in methods
    )


async def run_experiment(config: ExperimentConfig, *, workers: int = 1) -> RunRecord:
    """Run every (N, seed, method) cell on a worker pool; order is cell order."""
    cells = experiment_cells(config)
    LOGGER.info(
        "Running %d %s cells on %d workers", len(cells), config.family, workers
    )
    loop = asyncio.get_running_loop()

    async def run(pool: ThreadPoolExecutor, cell: Cell) -> CellDigest:
        return await loop.run_in_executor(
            pool, functools.partial(run_cell, config, cell)
        )

    with ThreadPoolExecutor(max_workers=workers) as pool:
        async with asyncio.TaskGroup() as tg:
            tasks = {cell: tg.create_task(run(pool, cell)) for cell in cells}
    digests = tuple(tasks[cell].result() for cell in cells)
    fractions, splits = compute_metrics(digests)
    return RunRecord(
        config=config.model_dump(mode="json"),
        digests=digests,
        fractions=fractions,
        splits=splits,
    )


def audit(record: RunRecord) -> bool:
    """Whether the stored metrics equal those recomputed from the digests."""
    fractions, splits = compute_metrics(record.digests)
    return fractions == record.fractions and _same_splits(splits, record.splits)


def _same_splits(ours: Sequence[SplitRow], theirs: Sequence[SplitRow]) -> bool:
    if len(ours) != len(theirs):
        return False
    for a, b in zip(ours, theirs, strict=True):
        if (a.family, a.n, a.seed, a.method, a.excluded) != (
            b.family,
            b.n,
            b.seed,
            b.method,
            b.excluded,
        ):
            return False
        both_nan = math.isnan(a.fraction) and math.isnan(b.fraction)
        if a.fraction != b.fraction and not both_nan:
            return False
    return True


def metrics_frame(record: RunRecord) -> pd.DataFrame:
    rows = [
        {
            "family": d.family,
            "N": d.n,
            "seed": d.seed,
            "method": d.method,
            "stage": stage,
            "example-id": i,
            "loss": loss,
        }
        for d in record.digests
        for stage, losses in d.stages.items()
        for i, loss in enumerate(losses)
    ]
    frame = pd.DataFrame(
        rows, columns=["family", "N", "seed", "method", "stage", "example-id", "loss"]
    )
    return frame.sort_values(
        ["N", "seed", "method", "stage", "example-id"], kind="stable"
    ).reset_index(drop=True)


def fractions_frame(record: RunRecord) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "family": row.family,
                "N": row.n,
                "method": row.method,
                "stage": row.stage,
                "f_mean": row.f_mean,
                "f_bar": row.f_bar,
            }
            for row in record.fractions
        ],
        columns=["family", "N", "method", "stage", "f_mean", "f_bar"],
    )


def splits_frame(record: RunRecord) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "family": row.family,
                "N": row.n,
                "seed": row.seed,
                "method": row.method,
                "split": row.fraction,
                "excluded": row.excluded,
            }
            for row in record.splits
        ],
        columns=["family", "N", "seed", "method", "split", "excluded"],
    )


def curves_frame(record: RunRecord) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "family": d.family,
                "N": d.n,
                "seed": d.seed,
                "method": d.method,
                "iteration": iteration,
                "mean_loss": loss,
            }
            for d in record.digests
            for iteration, loss in d.curve
        ],
        columns=["family", "N", "seed", "method", "iteration", "mean_loss"],
    )


def save_record(record: RunRecord, path: Path) -> None:
    path.write_text(json.dumps(RunRecordSchema().dump(record), sort_keys=True))


def load_record(path: Path) -> RunRecord:
    return RunRecordSchema().load(json.loads(path.read_text()))


def save_alignment_fit(fit: AlignmentFit, path: Path) -> None:
    path.write_text(json.dumps(AlignmentFitSchema().dump(fit), sort_keys=True))


def load_alignment_fit(path: Path) -> AlignmentFit:
    return AlignmentFitSchema().load(json.loads(path.read_text()))


def report(record: RunRecord, output_dir: Path) -> list[Path]:
    """Write the CSV tables and ``record.json``; returns the written paths."""
    output_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "metrics.csv": metrics_frame(record),
        "fractions.csv": fractions_frame(record),
        "splits.csv": splits_frame(record),
        "curves.csv": curves_frame(record),
    }
    written = []
    for name, frame in tables.items():
        path = output_dir / name
        frame.to_csv(path, index=False)
        written.append(path)
    record_path = output_dir / "record.json"
    save_record(record, record_path)
    written.append(record_path)
    for failure in record.failures:
        LOGGER.warning(
            "Cell (N=%d, seed=%d, %s) failed: %s",
            failure.n,
            failure.seed,
            failure.method,
            failure.error,
        )
    LOGGER.info("Wrote %d files to %s", len(written), output_dir)
    return written
