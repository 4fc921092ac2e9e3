"""Versioned binary container for problem sets, network parameters and results.

Layout: magic ``JPOB``, little-endian uint16 format version, uint32 header
length, a JSON header, then raw little-endian float64 arrays in the order the
header lists them.
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from marshmallow import ValidationError

from .methods import MethodResult, MethodTag, Refinement
from .networks import NetKind, NetParams, NetSpec
from .optimizers import TerminationReason
from .problems import Family, ProblemSet, SolutionBatch
from .schema import ArrayEntry, ContainerHeader, ContainerHeaderSchema, ContainerKind


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

MAGIC = b"JPOB"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPE = np.dtype("<f8")


class ContainerError(ValueError):
    pass


def write_container(
    path: Path, header: ContainerHeader, arrays: Mapping[str, Array]
) -> None:
    entries = tuple(
        ArrayEntry(name=name, shape=tuple(np.shape(value)))
        for name, value in arrays.items()
    )
    header = ContainerHeader(
        kind=header.kind,
        arrays=entries,
        family=header.family,
        n=header.n,
        seed=header.seed,
        meta=header.meta,
    )
    encoded = json.dumps(ContainerHeaderSchema().dump(header), sort_keys=True).encode()
    with path.open("wb") as stream:
        stream.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(encoded)))
        stream.write(encoded)
        for value in arrays.values():
            stream.write(np.ascontiguousarray(value, dtype=_DTYPE).tobytes())
    LOGGER.debug("Wrote %s container %s", header.kind, path)


def read_container(
    path: Path, kind: ContainerKind | None = None
) -> tuple[ContainerHeader, dict[str, Array]]:
    payload = path.read_bytes()
    if len(payload) < _PREFIX.size:
        msg = f"{path} is too short to be a container"
        raise ContainerError(msg)
    magic, version, length = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        msg = f"{path} is not a container (magic {magic!r})"
        raise ContainerError(msg)
    if version != FORMAT_VERSION:
        msg = f"Unsupported container version {version}"
        raise ContainerError(msg)
    start = _PREFIX.size
    try:
        header: ContainerHeader = ContainerHeaderSchema().load(
            json.loads(payload[start : start + length])
        )
    except (ValueError, ValidationError) as ex:
        msg = f"Malformed container header in {path}"
        raise ContainerError(msg) from ex
    if kind is not None and header.kind != kind:
        msg = f"{path} holds a {header.kind}, expected a {kind}"
        raise ContainerError(msg)
    offset = start + length
    arrays: dict[str, Array] = {}
    for entry in header.arrays:
        end = offset + entry.size * _DTYPE.itemsize
        if end > len(payload):
            msg = f"{path} is truncated inside array {entry.name!r}"
            raise ContainerError(msg)
        arrays[entry.name] = (
            np.frombuffer(payload, dtype=_DTYPE, count=entry.size, offset=offset)
            .reshape(entry.shape)
            .astype(np.float64)
        )
        offset = end
    if offset != len(payload):
        msg = f"{path} has {len(payload) - offset} trailing bytes"
        raise ContainerError(msg)
    return header, arrays


def save_problem_set(
    path: Path, problems: ProblemSet, *, include_truth: bool = True
) -> None:
    arrays = {"targets": problems.targets}
    arrays.update({f"conditioning.{k}": v for k, v in problems.conditioning.items()})
    if include_truth and problems.hidden_truth is not None:
        arrays["hidden_truth"] = problems.hidden_truth
    header = ContainerHeader(
        kind=ContainerKind.PROBLEM_SET,
        arrays=(),
        family=problems.family.value,
        n=problems.n,
        seed=problems.seed,
    )
    write_container(path, header, arrays)


def load_problem_set(path: Path) -> ProblemSet:
    header, arrays = read_container(path, ContainerKind.PROBLEM_SET)
    prefix = "conditioning."
    return ProblemSet(
        family=Family(header.family),
        seed=header.seed,
        conditioning={
            name.removeprefix(prefix): value
            for name, value in arrays.items()
            if name.startswith(prefix)
        },
        targets=arrays["targets"],
        hidden_truth=arrays.get("hidden_truth"),
    )


def _spec_meta(spec: NetSpec) -> dict[str, Any]:
    return {
        "kind": spec.kind.value,
        "outputs": spec.outputs,
        "hidden": list(spec.hidden),
        "inputs": spec.inputs,
        "encoding": spec.encoding,
        "channels": spec.channels,
        "length": spec.length,
        "conv": list(spec.conv),
    }


def _spec_from_meta(meta: Mapping[str, Any]) -> NetSpec:
    try:
        return NetSpec(
            kind=NetKind(meta["kind"]),
            outputs=int(meta["outputs"]),
            hidden=tuple(meta["hidden"]),
            inputs=int(meta["inputs"]),
            encoding=int(meta["encoding"]),
            channels=int(meta["channels"]),
            length=int(meta["length"]),
            conv=tuple(meta["conv"]),
        )
    except (KeyError, ValueError) as ex:
        msg = "Container does not describe a valid network"
        raise ContainerError(msg) from ex


def save_net_params(path: Path, params: NetParams) -> None:
    arrays = {"flat": params.flat}
    arrays.update({f"stats.{k}": v for k, v in params.stats.items()})
    header = ContainerHeader(
        kind=ContainerKind.NET_PARAMS,
        arrays=(),
        meta={"spec": _spec_meta(params.spec), "digest": params.spec.digest},
    )
    write_container(path, header, arrays)


def load_net_params(path: Path) -> NetParams:
    header, arrays = read_container(path, ContainerKind.NET_PARAMS)
    spec = _spec_from_meta(header.meta.get("spec", {}))
    prefix = "stats."
    return NetParams(
        spec=spec,
        flat=arrays["flat"],
        stats={
            name.removeprefix(prefix): value
            for name, value in arrays.items()
            if name.startswith(prefix)
        },
    )


def save_method_result(path: Path, result: MethodResult, *, seed: int = 0) -> None:
    arrays = {
        "history": np.stack([batch.estimates for batch in result.history]),
        "history_losses": result.history_losses,
        "best": result.best,
        "best_losses": result.best_losses,
    }
    meta: dict[str, Any] = {
        "method": result.method.value,
        "iterations": [batch.iteration for batch in result.history],
        "warnings": list(result.warnings),
    }
    if result.refinement is not None:
        refinement = result.refinement
        arrays.update(
            {
                "refinement.start": refinement.start,
                "refinement.start_losses": refinement.start_losses,
                "refinement.estimates": refinement.estimates,
                "refinement.losses": refinement.losses,
                "refinement.iterations": refinement.iterations.astype(np.float64),
            }
        )
        meta["reasons"] = [reason.value for reason in refinement.reasons]
    header = ContainerHeader(
        kind=ContainerKind.METHOD_RESULT,
        arrays=(),
        family=result.family.value,
        n=int(result.best.shape[0]),
        seed=seed,
        meta=meta,
    )
    write_container(path, header, arrays)


def load_method_result(path: Path) -> MethodResult:
    header, arrays = read_container(path, ContainerKind.METHOD_RESULT)
    family = Family(header.family)
    history = tuple(
        SolutionBatch(family=family, estimates=estimates, iteration=int(iteration))
        for estimates, iteration in zip(
            arrays["history"], header.meta["iterations"], strict=True
        )
    )
    refinement = None
    if "refinement.estimates" in arrays:
        refinement = Refinement(
            start=arrays["refinement.start"],
            start_losses=arrays["refinement.start_losses"],
            estimates=arrays["refinement.estimates"],
            losses=arrays["refinement.losses"],
            iterations=arrays["refinement.iterations"].astype(np.int64),
            reasons=tuple(TerminationReason(r) for r in header.meta["reasons"]),
        )
    return MethodResult(
        method=MethodTag(header.meta["method"]),
        family=family,
        history=history,
        history_losses=arrays["history_losses"],
        best=arrays["best"],
        best_losses=arrays["best_losses"],
        warnings=tuple(header.meta.get("warnings", ())),
        refinement=refinement,
    )
