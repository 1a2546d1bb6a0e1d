import csv
import io
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]

T = TypeVar("T")
R = TypeVar("R")

# Independent RNG streams; a seed is always combined with one of these.
STREAM_ENV_LAYOUT = 1
STREAM_ENV_MONTE_CARLO = 2
STREAM_ENCODING = 3
STREAM_DATASET = 4
STREAM_BENCH = 5
STREAM_TRAIN = 6
STREAM_PLAN = 7


def make_rng(*keys: int) -> np.random.Generator:
    """Creates a generator seeded by the tuple `keys`.

    Args:
        keys (int):
            non-negative integers, e.g., (seed, stream, env index, pair index)

    Returns:
        np.random.Generator:
            a generator whose stream only depends on `keys`
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    """Derives a 63-bit seed from the tuple `keys`."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(
        1, np.uint64
    )
    return int(state[0] >> np.uint64(1))


def write_atomic(path: Path, contents: str | bytes) -> None:
    """Writes `contents` to `path` through a temporary file in the same
    directory followed by a rename, so readers never observe a partial file.

    Args:
        path (Path):
            destination file, its parent directory is created if missing
        contents (str | bytes):
            what to write
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(contents, bytes) else "w"
    ntf = tempfile.NamedTemporaryFile(
        mode=mode, dir=path.parent, prefix=f".{path.name}.", delete=False
    )
    try:
        with ntf as f:
            f.write(contents)
        os.replace(ntf.name, path)
    except BaseException:
        if Path(ntf.name).exists():
            os.remove(ntf.name)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Renders a CSV document; floats use their shortest round-trip repr
    (so +infinity is written as "inf")."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def parallel_map(
    func: Callable[[T], R], items: Sequence[T], jobs: int, chunksize: int = 1
) -> Iterator[R]:
    """Maps `func` over `items`, in a process pool if jobs > 1.

    Results are yielded in the order of `items` either way, so parallel
    and serial executions are interchangeable.

    Example:
    for result in parallel_map(run_job, jobs_list, jobs=8):
        ...

    Args:
        func (Callable[[T], R]):
            a picklable (module-level) function
        items (Sequence[T]):
            picklable job descriptions
        jobs (int):
            number of worker processes
        chunksize (int):
            how many items are sent to a worker at once
    Returns:
        Iterator[R]: the results
    """
    if jobs <= 1 or len(items) <= 1:
        yield from map(func, items)
        return
    with ProcessPoolExecutor(min(jobs, len(items))) as executor:
        yield from executor.map(func, items, chunksize=chunksize)
