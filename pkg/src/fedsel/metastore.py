"""Per-client metadata registry.

A single-writer store of per-client aggregates fed by round feedback. Each
client costs a constant handful of fields no matter how many rounds it has
participated in. Selectors read immutable snapshot views; the whole store can
be checkpointed to a versioned JSON file and restored bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import threading
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import CheckpointError, StaleFeedbackError, UnknownClientError
from .training import clip_cap

CHECKPOINT_VERSION = "fedsel-metastore-v1"


@dataclass
class ClientRecord:
    """Everything the selectors know about one client."""

    client_id: str
    speed_hint: float | None = None
    stat_utility: float = 0.0
    last_round: int = 0
    duration: float = 0.0
    times_selected: int = 0
    blacklisted: bool = False
    explored: bool = False


@dataclass(frozen=True)
class RoundFeedback:
    """One client's report for one round: aggregate utility plus wall time."""

    client_id: str
    agg_stat_value: float
    wall_duration: float
    round_index: int


@dataclass(frozen=True)
class Checkpoint:
    """Serializable snapshot of the full store state."""

    version: str
    round_index: int
    preferred_duration: float
    utility_history: tuple[float, ...]
    records: tuple[ClientRecord, ...]

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "round_index": self.round_index,
            "preferred_duration": self.preferred_duration,
            "utility_history": list(self.utility_history),
            "records": [dataclasses.asdict(r) for r in self.records],
        }
        return json.dumps(payload, indent=None, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or "version" not in payload:
            raise CheckpointError("checkpoint is missing its version field")
        if payload["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {payload['version']!r}")
        try:
            records = tuple(ClientRecord(**r) for r in payload["records"])
            return cls(
                version=payload["version"],
                round_index=int(payload["round_index"]),
                preferred_duration=float(payload["preferred_duration"]),
                utility_history=tuple(float(v) for v in payload["utility_history"]),
                records=records,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint payload: {exc}") from exc


@dataclass(frozen=True)
class StoreView:
    """Immutable snapshot handed to selectors; safe to share across threads."""

    records: Mapping[str, ClientRecord]
    round_index: int
    preferred_duration: float
    utility_history: tuple[float, ...]


class MetaStore:
    """Registry of :class:`ClientRecord`, round counter and pacer state.

    Feedback ingestion and checkpointing are serialized behind one lock;
    readers work from :meth:`view` snapshots.
    """

    def __init__(self, preferred_duration: float, clip_percentile: float = 95.0,
                 blacklist_threshold: int = 10, checkpoint_every: int = 10,
                 checkpoint_path: str | None = None):
        if preferred_duration <= 0:
            raise ValueError("preferred_duration must be > 0")
        if blacklist_threshold < 1:
            raise ValueError("blacklist_threshold must be >= 1")
        if checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        self._lock = threading.Lock()
        self._records: dict[str, ClientRecord] = {}
        self._round = 0
        self._preferred_duration = float(preferred_duration)
        self._utility_history: list[float] = []
        self.clip_percentile = clip_percentile
        self.blacklist_threshold = blacklist_threshold
        self.checkpoint_every = checkpoint_every
        self.checkpoint_path = checkpoint_path

    # -- registration and round bookkeeping --------------------------------

    def register_client(self, client_id: str, speed_hint: float | None = None) -> None:
        """Clients must be registered before any feedback is accepted."""
        if speed_hint is not None and speed_hint <= 0:
            raise ValueError("speed_hint must be > 0 when given")
        with self._lock:
            if client_id in self._records:
                raise ValueError(f"client {client_id!r} already registered")
            self._records[client_id] = ClientRecord(client_id=client_id,
                                                    speed_hint=speed_hint)

    def advance_round(self) -> int:
        """Open the next round; returns its index (1-based)."""
        with self._lock:
            self._round += 1
            while len(self._utility_history) < self._round:
                self._utility_history.append(0.0)
            r = self._round
        if self.checkpoint_path is not None and r % self.checkpoint_every == 0:
            self.save(self.checkpoint_path)
        return r

    @property
    def round_index(self) -> int:
        return self._round

    @property
    def preferred_duration(self) -> float:
        return self._preferred_duration

    def set_preferred_duration(self, value: float) -> None:
        """The preferred duration only ever relaxes upward."""
        with self._lock:
            if value < self._preferred_duration:
                raise ValueError("preferred_duration is nondecreasing")
            self._preferred_duration = float(value)

    @property
    def client_count(self) -> int:
        return len(self._records)

    def client_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._records)

    # -- feedback ingestion -------------------------------------------------

    def update_with_feedback(self, batch: Iterable[RoundFeedback]) -> int:
        """Fold a round's feedback into the records; returns clients updated.

        The whole batch is validated first and applied atomically: one bad
        item rejects the batch and leaves the store untouched.
        """
        items = list(batch)
        if not items:
            return 0
        with self._lock:
            seen: set[str] = set()
            for fb in items:
                rec = self._records.get(fb.client_id)
                if rec is None:
                    raise UnknownClientError(fb.client_id)
                if fb.round_index != self._round or fb.client_id in seen:
                    raise StaleFeedbackError(fb.client_id, fb.round_index, self._round)
                if rec.explored and rec.last_round >= fb.round_index:
                    raise StaleFeedbackError(fb.client_id, fb.round_index, self._round)
                if not math.isfinite(fb.agg_stat_value) or fb.agg_stat_value < 0:
                    raise ValueError("agg_stat_value must be finite and nonnegative")
                if not fb.wall_duration > 0:
                    raise ValueError("wall_duration must be > 0")
                seen.add(fb.client_id)

            # Cap comes from the explored-utility distribution with the
            # incoming values substituted in for their reporters.
            candidates = [r.stat_utility for r in self._records.values()
                          if r.explored and r.client_id not in seen]
            candidates.extend(fb.agg_stat_value for fb in items)
            cap = clip_cap(candidates, self.clip_percentile)

            achieved = 0.0
            for fb in items:
                rec = self._records[fb.client_id]
                rec.stat_utility = min(fb.agg_stat_value, cap)
                rec.last_round = fb.round_index
                rec.duration = fb.wall_duration
                rec.times_selected += 1
                rec.explored = True
                if rec.times_selected >= self.blacklist_threshold:
                    rec.blacklisted = True
                achieved += rec.stat_utility
            self._utility_history[self._round - 1] += achieved
            return len(items)

    # -- snapshots -----------------------------------------------------------

    def view(self) -> StoreView:
        with self._lock:
            records = {cid: dataclasses.replace(rec)
                       for cid, rec in self._records.items()}
            return StoreView(
                records=records,
                round_index=self._round,
                preferred_duration=self._preferred_duration,
                utility_history=tuple(self._utility_history),
            )

    def snapshot(self) -> Checkpoint:
        with self._lock:
            return Checkpoint(
                version=CHECKPOINT_VERSION,
                round_index=self._round,
                preferred_duration=self._preferred_duration,
                utility_history=tuple(self._utility_history),
                records=tuple(dataclasses.replace(r)
                              for r in sorted(self._records.values(),
                                              key=lambda r: r.client_id)),
            )

    def restore(self, checkpoint: Checkpoint) -> None:
        """Replace all in-memory state; rejects bad checkpoints untouched."""
        if checkpoint.version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {checkpoint.version!r}")
        records = {r.client_id: dataclasses.replace(r) for r in checkpoint.records}
        if len(records) != len(checkpoint.records):
            raise CheckpointError("checkpoint contains duplicate client ids")
        with self._lock:
            self._records = records
            self._round = checkpoint.round_index
            self._preferred_duration = checkpoint.preferred_duration
            self._utility_history = list(checkpoint.utility_history)

    def save(self, path: str) -> None:
        """Write the current snapshot atomically."""
        text = self.snapshot().to_json()
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)

    def load(self, path: str) -> None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
        self.restore(Checkpoint.from_json(text))
