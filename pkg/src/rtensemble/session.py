"""EEG session container and its on-disk directory format.

A session directory holds:

* ``meta.json``   -- ids, sampling rate, channel order, provenance block
* ``eeg.bin``     -- little-endian float32, sample-major (one 30-float group
  per time sample, in ``channel_names`` order)
* ``events.csv``  -- one row per lane-departure trial with onset/response
  times and the recorded reaction time, in decimal seconds
* ``truth.json``  -- optional generator ground truth (synthetic sessions only)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .io_utils import atomic_write_bytes, atomic_write_text, fmt_float, read_json, write_json

#: Channels whose theta power + alpha coherence drive the ensemble weights,
#: in the fixed order used for coherence pair enumeration.
WEIGHTING_CHANNELS = ("O1", "O2", "Oz", "P3", "Pz", "P4", "CP3", "CPz", "CP4", "Cz")

#: Default 30-channel extended 10-20 montage.
DEFAULT_CHANNELS = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
    "FT7", "FC3", "FCz", "FC4", "FT8",
    "T3", "C3", "Cz", "C4", "T4",
    "TP7", "CP3", "CPz", "CP4", "TP8",
    "T5", "P3", "Pz", "P4", "T6",
    "O1", "Oz", "O2",
)

ANALYSIS_WINDOW_S = 90


@dataclass(frozen=True)
class TrialEvent:
    """A single lane-departure trial."""

    deviation_onset_s: float
    response_onset_s: float
    response_offset_s: float
    rt_s: float

    def validate(self) -> None:
        if not (self.deviation_onset_s < self.response_onset_s <= self.response_offset_s):
            raise ValidationError(
                f"trial times out of order: onset={self.deviation_onset_s}, "
                f"response={self.response_onset_s}, offset={self.response_offset_s}"
            )
        if abs(self.rt_s - (self.response_onset_s - self.deviation_onset_s)) > 1e-9:
            raise ValidationError(
                f"rt_s={self.rt_s} does not equal response minus deviation onset"
            )
        if self.rt_s <= 0:
            raise ValidationError(f"non-positive reaction time: {self.rt_s}")


@dataclass
class EegSession:
    """Multichannel raw EEG plus the trial events recorded with it."""

    subject_id: str
    session_id: str
    sample_rate_hz: float
    channel_names: tuple[str, ...]
    samples: np.ndarray  # [n_samples, n_channels] microvolts
    events: list[TrialEvent] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise ValidationError(f"channel {name!r} not in session montage") from None

    def channel(self, name: str) -> np.ndarray:
        return self.samples[:, self.channel_index(name)]

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"bad sample rate: {self.sample_rate_hz}")
        if self.samples.ndim != 2 or self.samples.shape[1] != len(self.channel_names):
            raise ValidationError(
                f"samples shape {self.samples.shape} does not match "
                f"{len(self.channel_names)} channels"
            )
        for name in WEIGHTING_CHANNELS:
            if self.channel_names.count(name) != 1:
                raise ValidationError(f"channel {name!r} must appear exactly once")
        if self.n_samples < ANALYSIS_WINDOW_S * self.sample_rate_hz:
            raise ValidationError(
                f"session too short: {self.n_samples} samples, need at least "
                f"{ANALYSIS_WINDOW_S} s at {self.sample_rate_hz} Hz"
            )
        onsets = [ev.deviation_onset_s for ev in self.events]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise ValidationError("event onsets must be strictly increasing")
        for ev in self.events:
            ev.validate()


def save_session(directory: str | Path, session: EegSession) -> None:
    """Write a session to its directory format (float32 EEG payload)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": session.subject_id,
        "session_id": session.session_id,
        "sample_rate_hz": session.sample_rate_hz,
        "channel_names": list(session.channel_names),
        "provenance": session.provenance,
    }
    write_json(directory / "meta.json", meta)
    atomic_write_bytes(
        directory / "eeg.bin",
        np.ascontiguousarray(session.samples, dtype="<f4").tobytes(),
    )
    lines = ["deviation_onset_s,response_onset_s,response_offset_s,rt_s"]
    for ev in session.events:
        lines.append(
            ",".join(
                fmt_float(v)
                for v in (ev.deviation_onset_s, ev.response_onset_s, ev.response_offset_s, ev.rt_s)
            )
        )
    atomic_write_text(directory / "events.csv", "\n".join(lines) + "\n")


def load_session(directory: str | Path, validate: bool = True) -> EegSession:
    """Load a session directory, checking structure and invariants."""
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    for key in ("subject_id", "session_id", "sample_rate_hz", "channel_names"):
        if key not in meta:
            raise ParseError(f"meta.json missing key {key!r} in {directory}")
    channels = tuple(meta["channel_names"])

    bin_path = directory / "eeg.bin"
    if not bin_path.is_file():
        raise ParseError(f"missing file: {bin_path}")
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size % len(channels) != 0:
        raise ParseError(
            f"eeg.bin length {raw.size} is not a multiple of {len(channels)} channels"
        )
    samples = raw.reshape(-1, len(channels)).astype(np.float64)

    events_path = directory / "events.csv"
    if not events_path.is_file():
        raise ParseError(f"missing file: {events_path}")
    events: list[TrialEvent] = []
    with open(events_path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "deviation_onset_s,response_onset_s,response_offset_s,rt_s":
            raise ParseError(f"unexpected events.csv header in {directory}: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"bad events.csv row at {events_path}:{lineno}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"non-numeric events.csv row at {events_path}:{lineno}") from exc
            events.append(TrialEvent(*vals))

    session = EegSession(
        subject_id=str(meta["subject_id"]),
        session_id=str(meta["session_id"]),
        sample_rate_hz=float(meta["sample_rate_hz"]),
        channel_names=channels,
        samples=samples,
        events=events,
        provenance=dict(meta.get("provenance", {})),
    )
    if validate:
        session.validate()
    return session


def list_corpus_sessions(corpus_dir: str | Path) -> list[Path]:
    """Session subdirectories of a corpus directory, sorted by name."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise ParseError(f"not a directory: {corpus_dir}")
    out = sorted(p for p in corpus_dir.iterdir() if (p / "meta.json").is_file())
    if not out:
        raise ParseError(f"no session directories under {corpus_dir}")
    return out
