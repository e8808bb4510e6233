"""Multi-rate exponential moving averages of checkpoint tensors.

Convention: a rate ``alpha`` is the weight given to the newest checkpoint,

    state <- (1 - alpha) * state + alpha * theta

so small rates such as 1e-3 average over roughly ``1/alpha`` steps. The first
checkpoint initializes every average; there is no bias correction. Averages
are accumulated in float64 and exported as float32.

Checkpoint file layout (all integers little-endian)::

    bytes 0..7    magic  b"MFCKPT01"
    bytes 8..11   uint32 header length H
    bytes 12..    H bytes of UTF-8 JSON header
    then          payload: float32 little-endian, tensors concatenated in
                  header order, each in C order

The header is ``{"dtype": "<f4", "step": int, "validation_loss": float|null,
"model_id": str|null, "tensors": [{"name": str, "shape": [int, ...]}]}``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from mitokit.errors import ConfigError, DataError

DEFAULT_DECAY_RATES = (1e-3, 5e-4, 2.5e-4)
MAGIC = b"MFCKPT01"
RAW_MODEL_ID = "raw"


@dataclass(frozen=True, eq=False)
class CheckpointSnapshot:
    step: int
    tensors: Mapping[str, np.ndarray]
    validation_loss: float | None = None
    model_id: str | None = None

    def __post_init__(self):
        tensors = {}
        for name, arr in self.tensors.items():
            a = np.asarray(arr)
            if not np.all(np.isfinite(a)):
                raise DataError(f"tensor {name!r} at step {self.step} has non-finite values")
            tensors[name] = a
        object.__setattr__(self, "tensors", tensors)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def __eq__(self, other):
        if not isinstance(other, CheckpointSnapshot):
            return NotImplemented
        return (
            self.step == other.step
            and self.model_id == other.model_id
            and _same_loss(self.validation_loss, other.validation_loss)
            and self.tensors.keys() == other.tensors.keys()
            and all(
                self.tensors[k].dtype == other.tensors[k].dtype
                and np.array_equal(self.tensors[k], other.tensors[k])
                for k in self.tensors
            )
        )


def _same_loss(a, b):
    return a == b or (a is not None and b is not None and math.isnan(a) and math.isnan(b))


def rate_model_id(alpha: float) -> str:
    return f"ema_{alpha:g}"


@dataclass
class EmaTracker:
    """Running averages at several rates plus best-so-far snapshots.

    ``best`` is keyed by model id: ``"raw"`` for the plain weights and
    ``ema_<rate>`` for each average.
    """

    decay_rates: Sequence[float] = DEFAULT_DECAY_RATES
    state: dict[float, dict[str, np.ndarray]] = field(default_factory=dict)
    shapes: dict[str, tuple[int, ...]] | None = None
    best: dict[str, CheckpointSnapshot] = field(default_factory=dict)
    step: int | None = None
    _latest: CheckpointSnapshot | None = field(default=None, repr=False)

    def __post_init__(self):
        self.decay_rates = tuple(float(a) for a in self.decay_rates)
        if not self.decay_rates:
            raise ConfigError("at least one decay rate is required")
        if len(set(self.decay_rates)) != len(self.decay_rates):
            raise ConfigError(f"duplicate decay rates {self.decay_rates}")
        for a in self.decay_rates:
            if not 0.0 < a <= 1.0:
                raise ConfigError(f"decay rate must lie in (0, 1], got {a}")

    def average(self, alpha: float) -> CheckpointSnapshot:
        """Current average at rate ``alpha`` as a float32 snapshot."""
        if alpha not in self.state:
            raise DataError("no checkpoint has been observed yet")
        return CheckpointSnapshot(
            self.step,
            {k: v.astype(np.float32) for k, v in self.state[alpha].items()},
            model_id=rate_model_id(alpha),
        )


def ema_update(tracker: EmaTracker, snapshot: CheckpointSnapshot) -> EmaTracker:
    """Fold ``snapshot`` into every running average (in place; returns the tracker)."""
    if tracker.shapes is None:
        tracker.shapes = snapshot.shapes
        for a in tracker.decay_rates:
            tracker.state[a] = {k: v.astype(np.float64, copy=True) for k, v in snapshot.tensors.items()}
    else:
        if snapshot.shapes != tracker.shapes:
            raise DataError(
                f"checkpoint at step {snapshot.step} has shapes {snapshot.shapes}, "
                f"expected {tracker.shapes}"
            )
        for a in tracker.decay_rates:
            for k, avg in tracker.state[a].items():
                avg *= 1.0 - a
                avg += a * snapshot.tensors[k].astype(np.float64)
    tracker.step = snapshot.step
    tracker._latest = snapshot
    return tracker


def record_validation(
    tracker: EmaTracker,
    snapshot: CheckpointSnapshot,
    average_losses: Mapping[float, float] | None = None,
) -> EmaTracker:
    """Keep snapshots of the raw weights and every average at the lowest loss seen.

    ``snapshot`` carries the raw weights and the validation loss measured at
    this point; it is also folded into the averages if it is newer than the
    last update. ``average_losses`` optionally maps a rate to the loss of that
    average itself; rates not listed are judged by the snapshot's loss.
    Replacement is strict, so the first of equal losses wins.
    """
    loss = snapshot.validation_loss
    if loss is None or not math.isfinite(loss):
        raise DataError(f"checkpoint at step {snapshot.step} has no finite validation loss")
    average_losses = dict(average_losses or {})
    unknown = set(average_losses) - set(tracker.decay_rates)
    if unknown:
        raise ConfigError(f"losses given for unconfigured rates {sorted(unknown)}")
    for a, v in average_losses.items():
        if v is None or not math.isfinite(v):
            raise DataError(f"average at rate {a:g} has no finite validation loss at step {snapshot.step}")
    if tracker._latest is not snapshot and (tracker.step is None or snapshot.step != tracker.step):
        ema_update(tracker, snapshot)

    raw = tracker.best.get(RAW_MODEL_ID)
    if raw is None or loss < raw.validation_loss:
        tracker.best[RAW_MODEL_ID] = CheckpointSnapshot(
            snapshot.step,
            {k: v.astype(np.float32) for k, v in snapshot.tensors.items()},
            loss,
            RAW_MODEL_ID,
        )
    for a in tracker.decay_rates:
        mid = rate_model_id(a)
        own = float(average_losses.get(a, loss))
        prev = tracker.best.get(mid)
        if prev is None or own < prev.validation_loss:
            avg = tracker.average(a)
            tracker.best[mid] = CheckpointSnapshot(avg.step, avg.tensors, own, mid)
    return tracker


def export_ensemble(tracker: EmaTracker) -> list[CheckpointSnapshot]:
    """Best raw snapshot followed by the best snapshot of each average, in rate order."""
    if RAW_MODEL_ID not in tracker.best:
        raise DataError("no validation loss has been recorded")
    return [tracker.best[RAW_MODEL_ID]] + [tracker.best[rate_model_id(a)] for a in tracker.decay_rates]


# -- checkpoint files ------------------------------------------------------


def save_checkpoint(snapshot: CheckpointSnapshot, path: str | Path) -> None:
    header = {
        "dtype": "<f4",
        "step": int(snapshot.step),
        "validation_loss": snapshot.validation_loss,
        "model_id": snapshot.model_id,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in snapshot.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in snapshot.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> CheckpointSnapshot:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{str(path)!r} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {str(path)!r}: {exc}") from None
    if header.get("dtype") != "<f4":
        raise DataError(f"unsupported checkpoint dtype {header.get('dtype')!r}")
    offset = 12 + hlen
    tensors = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * n > len(data):
            raise DataError(f"checkpoint {str(path)!r} is truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[t["name"]] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(data):
        raise DataError(f"checkpoint {str(path)!r} has {len(data) - offset} trailing bytes")
    return CheckpointSnapshot(header["step"], tensors, header.get("validation_loss"), header.get("model_id"))
