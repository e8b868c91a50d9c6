import json
import math
from typing import Any, Dict, Iterable, Iterator, List, Optional

import numpy as np
import pandas as pd

CODE_VERSION = "0.1.0"


class RigidityError(Exception):
    """Base class for every error raised by this package"""


class DomainError(RigidityError, ValueError):
    """Invalid parameters or inputs outside an operation's domain"""


class SingularityError(DomainError):
    """Evaluation at a coincident point of a singular kernel"""


class InitializationError(RigidityError):
    """A sampler could not be started from the given state"""


class ConfigError(RigidityError):
    """Malformed or incomplete experiment configuration"""


class StepFailure(RigidityError):
    """
    The integrator could not produce an admissible step.

    Carries the offending label pair and their distance; simulate() adds
    the failing step index before re-raising.
    """

    def __init__(self, message: str, pair=None, distance: float = float("nan"), step_index=None):
        super().__init__(message)
        self.pair = pair
        self.distance = distance
        self.step_index = step_index


def replica_seed(master_seed: int, replica: int, stream: int = 0) -> int:
    """
    Derive the seed of one replica from the master seed.

    Counter-based: replica k always maps to SeedSequence(master, spawn_key=(k,)),
    independent of how many replicas are run or in which order. A non-zero
    stream gives spawn_key=(k, stream), disjoint from every master seed's
    primary stream.
    """
    key = (int(replica),) if stream == 0 else (int(replica), int(stream))
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return int(seq.generate_state(2, dtype=np.uint64)[0])


def stream_generator(seed: int, stream_id: int) -> np.random.Generator:
    """Counter-based Philox generator for one labelled noise stream"""
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(seq))


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy containers to plain lists/floats for json.dumps.

    Floats go through Python's shortest repr, so a dump/load cycle is bit-exact.
    Non-finite floats become the strings "inf", "-inf" and "nan", which
    float() and numpy read back.
    """
    if isinstance(value, np.ndarray):
        if value.dtype.kind == "f" and not np.all(np.isfinite(value)):
            return to_jsonable(value.tolist())
        return value.tolist()
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def dumps_record(record: Dict) -> str:
    return json.dumps(to_jsonable(record), sort_keys=True, ensure_ascii=False, allow_nan=False)


def write_jsonl(path: str, records: Iterable[Dict]) -> None:
    """
    Write records as JSON lines
    """
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(dumps_record(record))
            f.write("\n")


def read_jsonl(path: str) -> Iterator[Dict]:
    """
    Iterate over the records of a JSON-lines file
    """
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def load_jsonl(path: str) -> List[Dict]:
    return list(read_jsonl(path))


def write_table(frame: pd.DataFrame, path: str, fmt: str = "csv", provenance: Optional[Dict] = None) -> None:
    """
    Write a table as CSV or JSON lines.

    CSV: UTF-8, "." decimal separator, header row; provenance, when given,
    goes on a single leading "# " line (read back with comment="#").
    JSON lines: provenance is the first record, {"provenance": ...}.
    """
    with open(path, "w", encoding="utf-8", newline="") as f:
        if fmt == "csv":
            if provenance is not None:
                f.write("# " + dumps_record(provenance) + "\n")
            frame.to_csv(f, index=False, lineterminator="\n")
        elif fmt == "jsonl":
            if provenance is not None:
                f.write(dumps_record({"provenance": provenance}) + "\n")
            for record in frame.to_dict(orient="records"):
                f.write(dumps_record(record) + "\n")
        else:
            raise DomainError(f"Unknown table format: {fmt!r}")
