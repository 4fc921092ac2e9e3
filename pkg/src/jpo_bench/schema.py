from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import StrEnum, unique
from typing import Any

from marshmallow import Schema, ValidationError, fields, post_load, validates_schema
from marshmallow.validate import Length, OneOf, Range

from .alignment_model import AlignmentFit, AlignmentModelParams


@unique
class ContainerKind(StrEnum):
    PROBLEM_SET = "problem-set"
    NET_PARAMS = "net-params"
    METHOD_RESULT = "method-result"


@unique
class Stage(StrEnum):
    INITIAL = "initial"
    NETWORK = "network"
    REFINED = "refined"


@dataclass(frozen=True)
class ArrayEntry:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ArrayEntrySchema(Schema):
    name = fields.String(required=True, validate=[Length(min=1)])
    shape = fields.List(fields.Integer(validate=[Range(min=0)]), required=True)

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> ArrayEntry:
        return ArrayEntry(name=data["name"], shape=tuple(data["shape"]))


@dataclass(frozen=True)
class ContainerHeader:
    kind: ContainerKind
    arrays: tuple[ArrayEntry, ...]
    family: str | None = None
    n: int = 0
    seed: int = 0
    meta: Mapping[str, Any] = field(default_factory=dict)


class ContainerHeaderSchema(Schema):
    kind = fields.Enum(ContainerKind, by_value=True, required=True)
    family = fields.String(allow_none=True, load_default=None)
    n = fields.Integer(validate=[Range(min=0)], load_default=0)
    seed = fields.Integer(validate=[Range(min=0)], load_default=0)
    arrays = fields.List(fields.Nested(ArrayEntrySchema), required=True)
    meta = fields.Dict(keys=fields.String(), load_default=dict)

    @validates_schema
    def validate_names(self, data: Mapping[str, Any], **kwargs: Any) -> None:
        names = [entry.name for entry in data.get("arrays", [])]
        if len(set(names)) != len(names):
            raise ValidationError({"arrays": ["array names must be unique"]})

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> ContainerHeader:
        return ContainerHeader(**{**data, "arrays": tuple(data["arrays"])})


@dataclass(frozen=True)
class CellDigest:
    """Per-example losses of one (N, seed, method) cell, by stage."""

    family: str
    n: int
    seed: int
    method: str
    stages: Mapping[str, list[float]] = field(default_factory=dict)
    curve: list[tuple[int, float]] = field(default_factory=list)
    refine_iterations: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


class CellDigestSchema(Schema):
    family = fields.String(required=True)
    n = fields.Integer(required=True, validate=[Range(min=1)])
    seed = fields.Integer(required=True, validate=[Range(min=0)])
    method = fields.String(required=True)
    stages = fields.Dict(
        keys=fields.String(validate=[OneOf([s.value for s in Stage])]),
        values=fields.List(fields.Float(allow_nan=True)),
        load_default=dict,
    )
    curve = fields.List(
        fields.Tuple((fields.Integer(), fields.Float(allow_nan=True))),
        load_default=list,
    )
    refine_iterations = fields.List(fields.Integer(), load_default=list)
    warnings = fields.List(fields.String(), load_default=list)
    error = fields.String(allow_none=True, load_default=None)

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> CellDigest:
        return CellDigest(**data)


@dataclass(frozen=True)
class FractionRow:
    family: str
    n: int
    method: str
    stage: str
    f_mean: float
    f_bar: float
    seeds: int


class FractionRowSchema(Schema):
    family = fields.String(required=True)
    n = fields.Integer(required=True)
    method = fields.String(required=True)
    stage = fields.String(required=True)
    f_mean = fields.Float(required=True)
    f_bar = fields.Float(required=True)
    seeds = fields.Integer(required=True)

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> FractionRow:
        return FractionRow(**data)


@dataclass(frozen=True)
class SplitRow:
    family: str
    n: int
    seed: int
    method: str
    fraction: float
    excluded: int


class SplitRowSchema(Schema):
    family = fields.String(required=True)
    n = fields.Integer(required=True)
    seed = fields.Integer(required=True)
    method = fields.String(required=True)
    fraction = fields.Float(required=True, allow_nan=True)
    excluded = fields.Integer(required=True)

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> SplitRow:
        return SplitRow(**data)


@dataclass(frozen=True)
class RunRecord:
    config: Mapping[str, Any]
    digests: tuple[CellDigest, ...]
    fractions: tuple[FractionRow, ...]
    splits: tuple[SplitRow, ...]

    @property
    def failures(self) -> tuple[CellDigest, ...]:
        return tuple(d for d in self.digests if d.failed)


class RunRecordSchema(Schema):
    config = fields.Dict(required=True)
    digests = fields.List(fields.Nested(CellDigestSchema), required=True)
    fractions = fields.List(fields.Nested(FractionRowSchema), required=True)
    splits = fields.List(fields.Nested(SplitRowSchema), required=True)

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> RunRecord:
        return RunRecord(
            config=data["config"],
            digests=tuple(data["digests"]),
            fractions=tuple(data["fractions"]),
            splits=tuple(data["splits"]),
        )


class AlignmentModelParamsSchema(Schema):
    plasticity = fields.Float(required=True, validate=Range(min=0, min_inclusive=False))
    complexity = fields.Float(required=True, validate=Range(min=0))

    @post_load
    def make_object(
        self, data: Mapping[str, Any], **kwargs: Any
    ) -> AlignmentModelParams:
        return AlignmentModelParams(**data)


class AlignmentFitSchema(Schema):
    params = fields.Nested(AlignmentModelParamsSchema, required=True)
    residual = fields.Float(required=True, allow_nan=True)
    flat = fields.Boolean(load_default=False)

    @post_load
    def make_object(self, data: Mapping[str, Any], **kwargs: Any) -> AlignmentFit:
        return AlignmentFit(**data)
