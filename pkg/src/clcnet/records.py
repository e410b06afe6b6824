"""In-memory containers for recorded classifier outputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, PairedRecordError


@dataclass
class ModelRunRecords:
    """Per-sample probability vectors and true labels produced by one classifier.

    ``flops_per_image`` may be ``None`` when only confidence training is
    needed; the cascade refuses such records.
    """

    name: str
    flops_per_image: float | None
    ids: list
    labels: np.ndarray
    probs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"probs must be 2-D, got shape {self.probs.shape}")
        if not (len(self.ids) == len(self.labels) == len(self.probs)):
            raise ValueError("ids, labels and probs differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("ids are not unique")
        if self.flops_per_image is not None and not self.flops_per_image > 0:
            raise ValueError(f"flops_per_image must be > 0, got {self.flops_per_image}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    def accuracy(self) -> float:
        if len(self) == 0:
            raise EmptyInputError("no records")
        return float(np.mean(self.correct))

    def subset(self, index) -> "ModelRunRecords":
        index = np.asarray(index)
        return ModelRunRecords(
            self.name,
            self.flops_per_image,
            [self.ids[i] for i in index],
            self.labels[index],
            self.probs[index],
            dict(self.meta),
        )


@dataclass
class PairedRunRecords:
    """Shallow and deep records over the same sample ids, aligned row by row."""

    shallow: ModelRunRecords
    deep: ModelRunRecords

    def __post_init__(self):
        if len(self.shallow) != len(self.deep) or set(self.shallow.ids) != set(self.deep.ids):
            raise PairedRecordError("shallow and deep records cover different sample ids")
        if self.shallow.ids != self.deep.ids:
            pos = {sid: i for i, sid in enumerate(self.deep.ids)}
            self.deep = self.deep.subset([pos[sid] for sid in self.shallow.ids])
        if not np.array_equal(self.shallow.labels, self.deep.labels):
            raise PairedRecordError("shallow and deep records disagree on true labels")

    def __len__(self) -> int:
        return len(self.shallow)

    @property
    def ids(self) -> list:
        return self.shallow.ids

    @property
    def labels(self) -> np.ndarray:
        return self.shallow.labels

    def subset(self, index) -> "PairedRunRecords":
        return PairedRunRecords(self.shallow.subset(index), self.deep.subset(index))
