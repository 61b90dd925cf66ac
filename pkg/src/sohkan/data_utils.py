import re
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pyarrow as pa
from loguru import logger

from sohkan.utils import read_csv_table, write_csv_columns


DATASET_SCHEMA = pa.schema(
    [
        pa.field("cycle", pa.int64(), nullable=False),
        pa.field("t_s", pa.float64(), nullable=False),
        pa.field("temp_c", pa.float64(), nullable=False),
        pa.field("current_a", pa.float64(), nullable=False),
        pa.field("voltage_v", pa.float64(), nullable=False),
        pa.field("ambient_c", pa.float64(), nullable=False),
    ]
)

PAIRS_SCHEMA = pa.schema(
    [
        pa.field("cycle", pa.int64(), nullable=False),
        pa.field("k_bar", pa.float64(), nullable=False),
        pa.field("t_bar_in", pa.float64(), nullable=False),
        pa.field("t_bar_target", pa.float64(), nullable=False),
        pa.field("split", pa.string(), nullable=False),
    ]
)

SPLITS = ("train", "validation", "test")

# Fractional part of the golden ratio, the step of the training offset sequence
GOLDEN_STEP = (5**0.5 - 1) / 2

ARROW_ROW_REGEX = re.compile(r"Row #(\d+)")


class CsvParseError(ValueError):
    """Raised when a telemetry CSV file does not satisfy the dataset schema or invariants."""

    def __init__(self, file_path: PathLike, message: str, row: int | None = None):
        location = f"{file_path}" if row is None else f"{file_path}, row {row}"
        super().__init__(f"{location}: {message}")
        self.file_path = Path(file_path)
        self.row = row


class CcPhaseError(ValueError):
    """Raised when a cycle has no usable constant-current phase."""

    def __init__(self, cycle: int, message: str):
        super().__init__(f"Cycle {cycle}: {message}")
        self.cycle = cycle


@dataclass(frozen=True, eq=False)
class CycleRecord:
    """Telemetry of one charge cycle. Sample i holds the temperature at t[i] and the current that
    is applied from t[i] until the next sample."""

    cycle_index: int
    t: np.ndarray
    temp: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    t_ambient: float

    def __post_init__(self):
        lengths = {len(self.t), len(self.temp), len(self.current), len(self.voltage)}
        if len(lengths) != 1:
            raise ValueError(f"Cycle {self.cycle_index}: time series have different lengths {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def tau(self) -> float:
        """Sampling interval (s), NaN for records with fewer than two samples."""
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else float("nan")


@dataclass(frozen=True, eq=False)
class CycleDataset:
    cycles: tuple[CycleRecord, ...]

    def __post_init__(self):
        for expected, record in enumerate(self.cycles):
            if record.cycle_index != expected:
                raise ValueError(
                    f"Cycle indices must be contiguous from 0: expected cycle {expected}, found {record.cycle_index}"
                )

    def __len__(self) -> int:
        return len(self.cycles)

    def __iter__(self) -> Iterator[CycleRecord]:
        return iter(self.cycles)

    def __getitem__(self, idx: int) -> CycleRecord:
        return self.cycles[idx]

    @property
    def n_eol(self) -> int:
        """Index E of the last (end-of-life) cycle."""
        return len(self.cycles) - 1

    @property
    def t_ambient(self) -> float:
        return float(np.mean([record.t_ambient for record in self.cycles]))


@dataclass(frozen=True)
class NormalizationParams:
    """Min-max normalization of temperatures, fitted on the training samples only."""

    t_min: float
    t_max: float

    def __post_init__(self):
        if not np.isfinite(self.t_min) or not np.isfinite(self.t_max):
            raise ValueError(f"Normalization bounds must be finite, got ({self.t_min}, {self.t_max})")
        if self.t_max <= self.t_min:
            raise ValueError(f"degenerate temperature range: t_min={self.t_min} and t_max={self.t_max}")

    @property
    def delta(self) -> float:
        return self.t_max - self.t_min

    def normalize(self, temp):
        return (np.asarray(temp, dtype=float) - self.t_min) / self.delta

    def denormalize(self, t_bar):
        return np.asarray(t_bar, dtype=float) * self.delta + self.t_min


@dataclass(frozen=True)
class SplitOffsets:
    """Sample offsets from the start of the CC phase at which each split takes its input sample.

    Validation and test read every cycle at one fixed offset. The training offset of cycle k walks
    over [train, train + train_span) along a golden-ratio sequence and skips the validation and test
    offsets, so the training inputs cover a temperature range even when every cycle starts at ambient.
    """

    train: int
    validation: int
    test: int
    train_span: int = 1

    @classmethod
    def for_horizon(cls, horizon_n: int) -> "SplitOffsets":
        return cls(train=0, validation=horizon_n // 3, test=(2 * horizon_n) // 3, train_span=horizon_n)

    def as_dict(self) -> dict[str, int]:
        return {"train": self.train, "validation": self.validation, "test": self.test, "train_span": self.train_span}

    def train_positions(self) -> np.ndarray:
        """Offsets the training split may use, in increasing order."""
        positions = np.arange(self.train, self.train + self.train_span)
        return positions[(positions != self.validation) & (positions != self.test)]

    def train_offsets(self, n_cycles: int) -> np.ndarray:
        """Training offset of each of `n_cycles` cycles. Cycle 0 always uses `train`."""
        positions = self.train_positions()
        slots = np.floor(np.mod(np.arange(n_cycles) * GOLDEN_STEP, 1.0) * len(positions)).astype(int)
        return positions[slots]

    @property
    def max_offset(self) -> int:
        return int(max(self.train_positions().max(), self.validation, self.test))

    def check_disjoint(self):
        offsets = self.as_dict()
        if min(self.train, self.validation, self.test) < 0:
            raise ValueError(f"Split offsets must be non-negative, got {offsets}")
        if self.train_span < 1:
            raise ValueError(f"train_span must be at least 1, got {self.train_span}")
        if self.validation == self.test or self.train_positions().size == 0:
            raise ValueError(f"Split offsets collide, the splits must use disjoint sample indices: {offsets}")


@dataclass(frozen=True)
class HorizonPair:
    cycle: int
    t_bar: float
    k_bar: float
    target: float


@dataclass(frozen=True)
class SplitData:
    norm: NormalizationParams
    offsets: SplitOffsets
    horizon_n: int
    n_eol: int
    t_bar_ambient: float
    cc_phases: tuple[tuple[int, int], ...]
    pairs: dict[str, list[HorizonPair]] = field(default_factory=dict)

    @property
    def train(self) -> list[HorizonPair]:
        return self.pairs["train"]

    @property
    def validation(self) -> list[HorizonPair]:
        return self.pairs["validation"]

    @property
    def test(self) -> list[HorizonPair]:
        return self.pairs["test"]


def pairs_to_arrays(pairs: Sequence[HorizonPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into model inputs of shape (n, 2) with columns (T̄, k̄) and targets of shape (n,)."""
    inputs = np.array([[pair.t_bar, pair.k_bar] for pair in pairs], dtype=float).reshape(-1, 2)
    targets = np.array([pair.target for pair in pairs], dtype=float)
    return inputs, targets


def _read_header(pfin: Path) -> list[str]:
    with pfin.open("r", encoding="utf-8") as fhin:
        header = fhin.readline().strip()
    return [name.strip().strip('"') for name in header.split(",")] if header else []


def load_csv(pfin: PathLike) -> CycleDataset:
    """Load per-sample telemetry written with the header `cycle,t_s,temp_c,current_a,voltage_v,ambient_c`.

    Args:
        pfin (PathLike): path to the CSV file

    Returns:
        CycleDataset: the parsed cycles, ordered by cycle index

    Raises:
        CsvParseError: for a missing column, unparseable value, empty data section, gaps or
        disorder in the cycle indices, non-monotone or non-uniform time, or a varying ambient
        temperature within a cycle. Rows are file line numbers (the header is row 1).
    """
    pfin = Path(pfin)
    if not pfin.is_file():
        raise FileNotFoundError(f"Dataset file not found: {pfin}")

    header = _read_header(pfin)
    missing = [name for name in DATASET_SCHEMA.names if name not in header]
    if missing:
        raise CsvParseError(pfin, f"missing column(s) {missing} in header {header}", row=1)

    try:
        table = read_csv_table(pfin, DATASET_SCHEMA)
    except pa.ArrowInvalid as exc:
        row_match = ARROW_ROW_REGEX.search(str(exc))
        raise CsvParseError(pfin, str(exc), row=int(row_match.group(1)) if row_match else None) from exc

    if table.num_rows == 0:
        raise CsvParseError(pfin, "no cycles in data section")

    columns = {name: table.column(name).to_numpy() for name in DATASET_SCHEMA.names}
    for name in DATASET_SCHEMA.names[1:]:
        bad = np.flatnonzero(~np.isfinite(columns[name]))
        if bad.size:
            raise CsvParseError(pfin, f"non-finite value in column '{name}'", row=int(bad[0]) + 2)

    cycles = columns["cycle"]
    if cycles[0] != 0:
        raise CsvParseError(pfin, f"cycle indices must start at 0, found cycle {cycles[0]}", row=2)

    jumps = np.diff(cycles)
    bad = np.flatnonzero((jumps != 0) & (jumps != 1))
    if bad.size:
        idx = int(bad[0]) + 1
        raise CsvParseError(
            pfin,
            f"out-of-order cycle {cycles[idx]} after cycle {cycles[idx - 1]}"
            f" (cycle indices must be contiguous and increasing)",
            row=idx + 2,
        )

    block_starts = np.concatenate(([0], np.flatnonzero(jumps) + 1))
    block_stops = np.concatenate((block_starts[1:], [len(cycles)]))
    dataset_tau = None
    records = []
    for start, stop in zip(block_starts, block_stops):
        cycle = int(cycles[start])
        t = columns["t_s"][start:stop]
        dt = np.diff(t)
        non_monotone = np.flatnonzero(dt <= 0)
        if non_monotone.size:
            raise CsvParseError(
                pfin, f"non-monotone time in cycle {cycle}", row=int(start + non_monotone[0]) + 3
            )

        if dt.size:
            cycle_tau = float(dt[0]) if dataset_tau is None else dataset_tau
            uneven = np.flatnonzero(~np.isclose(dt, cycle_tau, rtol=1e-9, atol=1e-12))
            if uneven.size:
                raise CsvParseError(
                    pfin,
                    f"non-uniform sampling in cycle {cycle}: expected spacing {cycle_tau} s",
                    row=int(start + uneven[0]) + 3,
                )
            dataset_tau = cycle_tau

        ambient = columns["ambient_c"][start:stop]
        varying = np.flatnonzero(ambient != ambient[0])
        if varying.size:
            raise CsvParseError(
                pfin, f"ambient temperature varies within cycle {cycle}", row=int(start + varying[0]) + 2
            )

        records.append(
            CycleRecord(
                cycle_index=cycle,
                t=t,
                temp=columns["temp_c"][start:stop],
                current=columns["current_a"][start:stop],
                voltage=columns["voltage_v"][start:stop],
                t_ambient=float(ambient[0]),
            )
        )

    logger.info(f"Loaded {len(records):,} cycles ({len(cycles):,} samples) from {pfin}")
    return CycleDataset(tuple(records))


def save_csv(dataset: CycleDataset, pfout: PathLike) -> Path:
    """Write a dataset in the schema that `load_csv` reads back."""
    records = dataset.cycles
    columns = {
        "cycle": np.concatenate([np.full(len(record), record.cycle_index, dtype=np.int64) for record in records]),
        "t_s": np.concatenate([record.t for record in records]),
        "temp_c": np.concatenate([record.temp for record in records]),
        "current_a": np.concatenate([record.current for record in records]),
        "voltage_v": np.concatenate([record.voltage for record in records]),
        "ambient_c": np.concatenate([np.full(len(record), record.t_ambient) for record in records]),
    }
    return write_csv_columns(columns, DATASET_SCHEMA, pfout)


def infer_cc_current(record: CycleRecord) -> float:
    """Guess the CC charging current of a cycle as the median of the samples carrying at least
    half of the maximum current."""
    if len(record) == 0:
        raise ValueError(f"Cycle {record.cycle_index}: empty record")

    peak = float(np.max(record.current))
    if peak <= 0:
        raise CcPhaseError(record.cycle_index, "no positive charging current")

    return float(np.median(record.current[record.current >= 0.5 * peak]))


def extract_cc_phase(record: CycleRecord, i_current: float, tol: float, horizon_n: int = 1) -> tuple[int, int]:
    """Find the constant-current phase of a cycle.

    Args:
        record (CycleRecord): the cycle
        i_current (float): the CC current (A)
        tol (float): allowed deviation |I - i_current| (A)
        horizon_n (int): horizon in samples, the run must hold at least horizon_n + 1 samples

    Returns:
        tuple[int, int]: half-open sample range [start, stop) of the longest matching run
    """
    if len(record) == 0:
        raise ValueError(f"Cycle {record.cycle_index}: empty record")

    in_phase = np.abs(record.current - i_current) <= tol
    edges = np.diff(np.concatenate(([0], in_phase.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    if starts.size == 0:
        raise CcPhaseError(record.cycle_index, f"no samples within {tol} A of the CC current {i_current} A")

    best = int(np.argmax(stops - starts))
    start, stop = int(starts[best]), int(stops[best])
    if stop - start < horizon_n + 1:
        raise CcPhaseError(
            record.cycle_index,
            f"CC phase too short for horizon: {stop - start} samples, need at least {horizon_n + 1}",
        )
    return start, stop


def _cc_sample_indices(
    cc_phases: Sequence[tuple[int, int]], offsets: Sequence[Sequence[int]]
) -> Iterator[tuple[int, int]]:
    for cycle, ((start, stop), cycle_offsets) in enumerate(zip(cc_phases, offsets, strict=True)):
        for offset in cycle_offsets:
            idx = start + offset
            if not start <= idx < stop:
                raise CcPhaseError(cycle, f"sample offset {offset} lies outside the CC phase [{start}, {stop})")
            yield cycle, idx


def compute_normalization(
    dataset: CycleDataset, cc_phases: Sequence[tuple[int, int]], train_offsets: Sequence[Sequence[int]]
) -> NormalizationParams:
    """Min-max bounds over the training samples, i.e. the samples at `train_offsets[k]` from the CC
    start of cycle k.

    Args:
        dataset (CycleDataset): the telemetry
        cc_phases (Sequence[tuple[int, int]]): CC phase range per cycle, see `extract_cc_phase`
        train_offsets (Sequence[Sequence[int]]): per cycle, the offsets of its training samples within
        the CC phase, e.g. (offset, offset + N) for the input and target of a training pair

    Returns:
        NormalizationParams: (t_min, t_max) over the training samples
    """
    if len(cc_phases) != len(dataset):
        raise ValueError(f"Got {len(cc_phases)} CC phases for {len(dataset)} cycles")
    if len(train_offsets) != len(dataset) or not any(len(offsets) for offsets in train_offsets):
        raise ValueError("The training sample set is empty or does not match the cycles")

    temps = np.array([dataset[cycle].temp[idx] for cycle, idx in _cc_sample_indices(cc_phases, train_offsets)])
    return NormalizationParams(t_min=float(np.min(temps)), t_max=float(np.max(temps)))


def normalized_cycle(cycle: int, n_eol: int) -> float:
    return cycle / n_eol if n_eol > 0 else 0.0


def _check_cc_lengths(dataset: CycleDataset, cc_phases: Sequence[tuple[int, int]], required: int):
    for record, (start, stop) in zip(dataset, cc_phases, strict=True):
        if stop - start < required:
            raise CcPhaseError(
                record.cycle_index,
                f"CC phase too short for horizon: {stop - start} samples, need {required} for the split offsets",
            )


def build_pairs(
    dataset: CycleDataset,
    norm: NormalizationParams,
    horizon_n: int,
    split_offsets: SplitOffsets,
    cc_phases: Sequence[tuple[int, int]],
) -> dict[str, list[HorizonPair]]:
    """Build one (T̄(i_k), k̄) -> T̄(i_k + N) pair per cycle and split. The training sample of each
    cycle sits at `split_offsets.train_offsets(...)`. Temperatures outside the training range are
    not clamped.

    Returns:
        dict[str, list[HorizonPair]]: pairs for "train", "validation" and "test", ordered by cycle
    """
    if horizon_n < 1:
        raise ValueError(f"The horizon must be at least one sample, got {horizon_n}")
    split_offsets.check_disjoint()

    _check_cc_lengths(dataset, cc_phases, split_offsets.max_offset + horizon_n + 1)
    train_offsets = split_offsets.train_offsets(len(dataset))
    n_eol = dataset.n_eol
    pairs = {split: [] for split in SPLITS}
    for record, (start, stop), train_offset in zip(dataset, cc_phases, train_offsets, strict=True):
        t_bar = norm.normalize(record.temp[start:stop])
        k_bar = normalized_cycle(record.cycle_index, n_eol)
        offsets = {"train": int(train_offset), "validation": split_offsets.validation, "test": split_offsets.test}
        for split in SPLITS:
            idx = offsets[split]
            pairs[split].append(
                HorizonPair(
                    cycle=record.cycle_index,
                    t_bar=float(t_bar[idx]),
                    k_bar=k_bar,
                    target=float(t_bar[idx + horizon_n]),
                )
            )
    return pairs


def prepare_splits(
    dataset: CycleDataset,
    horizon_n: int,
    offsets: SplitOffsets | None = None,
    cc_current: float | None = None,
    cc_tolerance: float = 0.05,
) -> SplitData:
    """Run CC-phase extraction, normalization and pair building on a full dataset.

    Args:
        dataset (CycleDataset): the telemetry
        horizon_n (int): horizon N in samples
        offsets (SplitOffsets | None): per-split offsets, defaults to `SplitOffsets.for_horizon(N)`
        cc_current (float | None): CC current in A; inferred per cycle if not given
        cc_tolerance (float): current tolerance of the CC phase detection (A)

    Returns:
        SplitData: normalization, CC phases and the three pair lists
    """
    offsets = offsets or SplitOffsets.for_horizon(horizon_n)
    offsets.check_disjoint()

    cc_phases = []
    for record in dataset:
        current = cc_current if cc_current is not None else infer_cc_current(record)
        cc_phases.append(extract_cc_phase(record, current, cc_tolerance, horizon_n=horizon_n))
    _check_cc_lengths(dataset, cc_phases, offsets.max_offset + horizon_n + 1)

    train_offsets = [(offset, offset + horizon_n) for offset in offsets.train_offsets(len(dataset))]
    norm = compute_normalization(dataset, cc_phases, train_offsets)
    pairs = build_pairs(dataset, norm, horizon_n, offsets, cc_phases)
    logger.info(
        f"Built {len(pairs['train']):,} pairs per split (N={horizon_n}, offsets={offsets.as_dict()},"
        f" T in [{norm.t_min:.3f}, {norm.t_max:.3f}] °C)"
    )
    return SplitData(
        norm=norm,
        offsets=offsets,
        horizon_n=horizon_n,
        n_eol=dataset.n_eol,
        t_bar_ambient=float(norm.normalize(dataset.t_ambient)),
        cc_phases=tuple(cc_phases),
        pairs=pairs,
    )


def export_pairs_csv(pairs: Mapping[str, Sequence[HorizonPair]], pfout: PathLike) -> Path:
    rows = [(pair, split) for split in SPLITS for pair in pairs.get(split, [])]
    columns = {
        "cycle": [pair.cycle for pair, _ in rows],
        "k_bar": [pair.k_bar for pair, _ in rows],
        "t_bar_in": [pair.t_bar for pair, _ in rows],
        "t_bar_target": [pair.target for pair, _ in rows],
        "split": [split for _, split in rows],
    }
    return write_csv_columns(columns, PAIRS_SCHEMA, pfout)
