"""Pydantic wire models for the HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..store import Annotation


class AnnotationModel(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    id: str
    kind: str
    class_label: str = Field(alias="class")
    provenance: str = "human"
    coords: list[tuple[float, float, float]]
    deleted: bool = False

    def to_annotation(self) -> Annotation:
        return Annotation(
            id=self.id,
            kind=self.kind,
            coords=tuple(self.coords),
            class_label=self.class_label,
            provenance=self.provenance,
            deleted=self.deleted,
        )


class ChangeSet(BaseModel):
    annotations: list[AnnotationModel]
    author: str = "anonymous"


class WriteResult(BaseModel):
    revision: int


class RetrainRequest(BaseModel):
    layer: str = "centroids"
    c: float = 1.0
    seed: int = 0


class RetrainResult(BaseModel):
    model_version: int
    trained_revision: int
    mean_auc: float
    fold_aucs: list[float]
