"""Dataset ingest: CSV loading, synthetic streams, normalization and splitting."""
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.exceptions import DataParseError, SizingError
from src.models import DATASET_PRESETS, DataSample, Dataset, SplitPlan, SyntheticFamily, SyntheticSpec
from src.rng import substream

logger = logging.getLogger(__name__)


class PretrainSet(BaseModel):
    """Samples reserved for training the model zoo."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dataset: Dataset
    indices: np.ndarray = Field(description="Row indices into the source dataset")

    @field_validator("indices", mode="before")
    def freeze_indices(cls, v):
        v = np.array(v, dtype=int)
        v.setflags(write=False)
        return v

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features

    @property
    def targets(self) -> np.ndarray:
        return self.dataset.targets

    def __len__(self) -> int:
        return len(self.dataset)


class ClientStream(BaseModel):
    """Samples dealt round-robin to ``clients`` clients over ``rounds`` rounds.

    Client ``i`` at round ``t`` (1-based) observes stream row
    ``((t - 1) * clients + i) mod len(stream)``; the stream wraps when short.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dataset: Dataset
    indices: np.ndarray = Field(description="Row indices into the source dataset")
    rounds: int = Field(ge=0)
    clients: int = Field(ge=1)

    @field_validator("indices", mode="before")
    def freeze_indices(cls, v):
        v = np.array(v, dtype=int)
        v.setflags(write=False)
        return v

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features

    @property
    def targets(self) -> np.ndarray:
        return self.dataset.targets

    def __len__(self) -> int:
        return len(self.dataset)

    def slot(self, t: int, client: int) -> int:
        """Stream row observed by ``client`` at round ``t``."""
        if not 0 <= client < self.clients:
            raise SizingError(f"client {client} outside [0, {self.clients})")
        if t < 1:
            raise SizingError(f"round {t} must be >= 1")
        return ((t - 1) * self.clients + client) % len(self.dataset)

    def slots(self, t: int, clients: List[int]) -> np.ndarray:
        return np.array([self.slot(t, i) for i in clients], dtype=int)

    def client_sample(self, t: int, client: int) -> DataSample:
        return self.dataset.sample(self.slot(t, client))


def _parse_error_location(message: str) -> Optional[int]:
    # pandas: "Expected 3 fields in line 5, saw 4"
    marker = "line "
    if marker not in message:
        return None
    tail = message.split(marker, 1)[1]
    digits = "".join(ch for ch in tail.split(",")[0] if ch.isdigit())
    return int(digits) if digits else None


def load_dataset(
    path: Union[str, Path],
    target_column: Union[str, int],
    name: Optional[str] = None,
    preset: Optional[str] = None,
) -> Dataset:
    """
    Load a numeric CSV file with a header row.

    Args:
        path: CSV file path
        target_column: Target column name or zero-based column index
        name: Dataset name (defaults to the file stem)
        preset: Optional preset name whose documented shape is checked

    Returns:
        Dataset with raw (unnormalized) values in file order
    """
    path = Path(path)
    if not path.is_file():
        raise DataParseError(f"dataset file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise DataParseError(f"{path} is empty") from exc
    except pd.errors.ParserError as exc:
        # Ragged rows: the reported line is 1-based including the header.
        line = _parse_error_location(str(exc))
        raise DataParseError(f"ragged row in {path}: {exc}", row=line) from exc

    if frame.shape[0] == 0:
        raise DataParseError(f"{path} has a header but no data rows (empty dataset)")

    columns = [str(c) for c in frame.columns]
    if isinstance(target_column, int):
        if not 0 <= target_column < len(columns):
            raise DataParseError(f"target column index {target_column} out of range", column=str(target_column))
        target_name = columns[target_column]
    else:
        if target_column not in columns:
            raise DataParseError(f"target column not found in {path}", column=str(target_column))
        target_name = target_column

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raw = frame.iat[row, col]
        reason = "missing value (ragged row)" if raw in ("", None) or pd.isna(raw) else f"non-numeric value '{raw}'"
        # Row numbers are 1-based file lines; the header is line 1.
        raise DataParseError(reason, row=int(row) + 2, column=columns[col])
    infinite = ~np.isfinite(numeric.to_numpy(dtype=float))
    if infinite.any():
        row, col = np.argwhere(infinite)[0]
        raise DataParseError(f"non-finite value '{frame.iat[row, col]}'", row=int(row) + 2, column=columns[col])

    feature_names = tuple(c for c in columns if c != target_name)
    dataset = Dataset(
        name=name or path.stem,
        features=numeric[list(feature_names)].to_numpy(dtype=float),
        targets=numeric[target_name].to_numpy(dtype=float),
        feature_names=feature_names,
        target_name=target_name,
    )
    if preset is not None:
        _check_preset(dataset, preset)
    logger.info("Loaded %s: %d samples, %d features", dataset.name, len(dataset), dataset.feature_count)
    return dataset


def _check_preset(dataset: Dataset, preset: str) -> None:
    info = DATASET_PRESETS.get(preset)
    if info is None:
        logger.warning("Unknown dataset preset '%s'; shape not checked", preset)
        return
    if len(dataset) != info.samples or dataset.feature_count != info.features:
        logger.warning(
            "%s: expected %d samples x %d features for preset '%s', found %d x %d",
            dataset.name, info.samples, info.features, preset, len(dataset), dataset.feature_count,
        )


def _minmax_columns(values: np.ndarray) -> np.ndarray:
    low = values.min(axis=0)
    high = values.max(axis=0)
    span = high - low
    constant = span == 0
    safe_span = np.where(constant, 1.0, span)
    scaled = (values - low) / safe_span
    return np.where(constant, 0.5, scaled)


def normalize_minmax(dataset: Dataset) -> Dataset:
    """Map every feature column and the target affinely onto [0, 1].

    Statistics come from the whole dataset; constant columns map to 0.5.
    """
    if len(dataset) == 0:
        raise SizingError("cannot normalize an empty dataset")
    features = _minmax_columns(dataset.features)
    targets = _minmax_columns(dataset.targets.reshape(-1, 1)).ravel()
    return dataset.model_copy(update={
        "features": _freeze(features),
        "targets": _freeze(targets),
    })


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _subset(dataset: Dataset, rows: np.ndarray, suffix: str) -> Dataset:
    return dataset.model_copy(update={
        "name": f"{dataset.name}:{suffix}",
        "features": _freeze(dataset.features[rows]),
        "targets": _freeze(dataset.targets[rows]),
    })


def partition(dataset: Dataset, plan: SplitPlan) -> Tuple[PretrainSet, ClientStream]:
    """
    Split a dataset into a pretraining set and a round-robin client stream.

    A seeded uniformly random ``pretrain_fraction`` of the rows (rounded to
    the nearest integer) becomes the pretraining set; the remaining rows keep
    their order and are dealt to T rounds x N clients, wrapping when short.
    """
    n = len(dataset)
    n_pretrain = int(round(plan.pretrain_fraction * n))
    if n_pretrain < 1:
        raise SizingError(
            f"{n} samples with pretrain fraction {plan.pretrain_fraction} leave no pretraining sample"
        )
    if n_pretrain >= n:
        raise SizingError(f"{n} samples leave nothing for the client stream")

    order = substream(plan.seed, "partition").permutation(n)
    pretrain_rows = np.sort(order[:n_pretrain])
    stream_rows = np.sort(order[n_pretrain:])

    slots = plan.rounds * plan.clients
    if slots > len(stream_rows):
        logger.info("Client stream wraps: %d slots over %d samples", slots, len(stream_rows))

    pretrain = PretrainSet(dataset=_subset(dataset, pretrain_rows, "pretrain"), indices=pretrain_rows)
    stream = ClientStream(
        dataset=_subset(dataset, stream_rows, "stream"),
        indices=stream_rows,
        rounds=plan.rounds,
        clients=plan.clients,
    )
    return pretrain, stream


def synthetic_dataset(spec: SyntheticSpec, seed: int) -> Dataset:
    """Generate a deterministic synthetic regression dataset (raw scale)."""
    if spec.sample_count <= 0 or spec.feature_count <= 0:
        raise SizingError(
            f"synthetic data needs n > 0 and d > 0, got n={spec.sample_count}, d={spec.feature_count}"
        )
    rng = substream(seed, "synthetic_data")
    d = spec.feature_count
    features = rng.random((spec.sample_count, d))
    coefficients = np.full(d, spec.slope / d)
    signal = features @ coefficients
    if spec.family is SyntheticFamily.SINE:
        signal = np.sin(2.0 * np.pi * spec.frequency * signal)
    noise = rng.normal(0.0, spec.noise, size=spec.sample_count) if spec.noise > 0 else 0.0
    return Dataset(
        name=f"synthetic-{spec.family.value}",
        features=features,
        targets=signal + noise,
        feature_names=tuple(f"x{i}" for i in range(d)),
        target_name="y",
    )
