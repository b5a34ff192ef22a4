"""String-wise note ingestion and one-hot MIDI conditioning.

Responsibilities:
    - Parse note annotations from the JSON-lines note format or from a
      6-track standard MIDI file (low E string = track 0 ... high e = track 5,
      pitch bends folded into continuous pitch).
    - Validate per-string monophony (no overlapping notes on one string).
    - Encode notes into the one-hot conditioning tensors (pitch over 305 bins,
      velocity over 64 bins, 128 frames per second).
    - Derive missing velocities from per-string audio as the peak unit-scaled
      dB(A) loudness over the note interval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import features
from .features import (
    FRAME_RATE,
    N_PITCH_BINS,
    N_STRINGS,
    N_VEL_BINS,
    SAMPLE_RATE,
    quantize,
    scale_f0_midi,
)

PITCH_BEND_RANGE_SEMITONES = 2.0


class NoteParseError(ValueError):
    """Malformed note record (carries the offending line number for files)."""


class NoteValidationError(ValueError):
    """Structurally valid notes that violate an invariant (overlap, range)."""


@dataclass(frozen=True)
class NoteEvent:
    string_index: int
    onset_s: float
    offset_s: float
    pitch_midi: float
    velocity_unit: float | None = None

    def __post_init__(self):
        if not 0 <= self.string_index < N_STRINGS:
            raise NoteValidationError(f"string index out of range [0, 6): {self}")
        if not self.offset_s > self.onset_s:
            raise NoteValidationError(f"note offset must exceed onset: {self}")
        if self.onset_s < 0:
            raise NoteValidationError(f"negative onset: {self}")
        if self.velocity_unit is not None and not 0.0 <= self.velocity_unit <= 1.0:
            raise NoteValidationError(f"velocity outside [0, 1]: {self}")


def _check_no_overlap(events):
    by_string = {}
    for ev in events:
        by_string.setdefault(ev.string_index, []).append(ev)
    for string_events in by_string.values():
        string_events.sort(key=lambda e: e.onset_s)
        for prev, nxt in zip(string_events, string_events[1:]):
            if nxt.onset_s < prev.offset_s:
                raise NoteValidationError(
                    f"overlapping notes on string {prev.string_index}: "
                    f"{prev} and {nxt}"
                )


def _sorted(events):
    return sorted(events, key=lambda e: (e.string_index, e.onset_s))


def parse_note_events(path):
    """Load note events from a ``.jsonl`` note file or a ``.mid`` standard MIDI file.

    Returns events sorted by (string_index, onset_s). Raises NoteParseError
    for malformed records (with the line number for JSONL input) and
    NoteValidationError for overlapping same-string notes.
    """
    path = Path(path)
    if path.suffix.lower() in (".mid", ".midi"):
        events = _parse_smf(path)
    else:
        events = _parse_jsonl(path)
    _check_no_overlap(events)
    return _sorted(events)


def _parse_jsonl(path):
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                events.append(
                    NoteEvent(
                        string_index=int(rec["string"]),
                        onset_s=float(rec["onset"]),
                        offset_s=float(rec["offset"]),
                        pitch_midi=float(rec["pitch"]),
                        velocity_unit=(
                            float(rec["velocity"]) if rec.get("velocity") is not None else None
                        ),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, NoteValidationError):
                    raise
                raise NoteParseError(f"{path}:{lineno}: malformed note record: {exc}") from exc
    return events


def write_note_events(events, path):
    """Serialize note events to the JSON-lines note format."""
    with open(path, "w") as fh:
        for ev in _sorted(events):
            rec = {
                "string": ev.string_index,
                "onset": ev.onset_s,
                "offset": ev.offset_s,
                "pitch": ev.pitch_midi,
            }
            if ev.velocity_unit is not None:
                rec["velocity"] = ev.velocity_unit
            fh.write(json.dumps(rec) + "\n")


# --- minimal standard-MIDI-file reader -------------------------------------
#
# Covers exactly the subset the note interface needs: format 0/1 files with
# metrical timing, note on/off, pitch wheel, and tempo meta events. Running
# status is honored.


def _read_varint(data, pos):
    value = 0
    while True:
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos


def _parse_track_events(data):
    """Yield (tick, status, payload) triples from one MTrk chunk body."""
    pos = 0
    tick = 0
    status = None
    while pos < len(data):
        delta, pos = _read_varint(data, pos)
        tick += delta
        byte = data[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise NoteParseError("running status byte before any status byte")
        if status == 0xFF:
            meta_type = data[pos]
            pos += 1
            length, pos = _read_varint(data, pos)
            yield tick, status, (meta_type, data[pos : pos + length])
            pos += length
        elif status in (0xF0, 0xF7):
            length, pos = _read_varint(data, pos)
            pos += length
        else:
            kind = status & 0xF0
            n_data = 1 if kind in (0xC0, 0xD0) else 2
            yield tick, status, tuple(data[pos : pos + n_data])
            pos += n_data


def _parse_smf(path):
    raw = Path(path).read_bytes()
    if raw[:4] != b"MThd":
        raise NoteParseError(f"{path}: not a standard MIDI file")
    division = int.from_bytes(raw[12:14], "big")
    if division & 0x8000:
        raise NoteParseError(f"{path}: SMPTE timing is not supported")

    chunks = []
    pos = 8 + int.from_bytes(raw[4:8], "big")
    while pos < len(raw):
        if raw[pos : pos + 4] != b"MTrk":
            raise NoteParseError(f"{path}: expected MTrk chunk at byte {pos}")
        length = int.from_bytes(raw[pos + 4 : pos + 8], "big")
        chunks.append(raw[pos + 8 : pos + 8 + length])
        pos += 8 + length

    tracks = [list(_parse_track_events(chunk)) for chunk in chunks]

    # Tempo map from all tracks (format 1 keeps it in the conductor track).
    tempo_changes = [(0, 500000)]
    for track in tracks:
        for tick, status, payload in track:
            if status == 0xFF and payload[0] == 0x51:
                tempo_changes.append((tick, int.from_bytes(payload[1], "big")))
    tempo_changes.sort()

    def tick_to_seconds(tick):
        seconds = 0.0
        prev_tick, tempo = tempo_changes[0]
        for change_tick, next_tempo in tempo_changes[1:]:
            if change_tick >= tick:
                break
            seconds += (change_tick - prev_tick) * tempo / (division * 1e6)
            prev_tick, tempo = change_tick, next_tempo
        return seconds + (tick - prev_tick) * tempo / (division * 1e6)

    def has_notes(track):
        return any(status & 0xF0 == 0x90 for _, status, _ in track)

    note_tracks = [t for t in tracks]
    if len(note_tracks) == N_STRINGS + 1 and not has_notes(note_tracks[0]):
        note_tracks = note_tracks[1:]
    if len(note_tracks) != N_STRINGS:
        raise NoteParseError(
            f"{path}: expected 6 string tracks, got {len(note_tracks)} "
            f"(plus an optional conductor track)"
        )

    events = []
    for string_index, track in enumerate(note_tracks):
        bend_semitones = 0.0
        open_note = None  # (pitch_number, onset_tick, velocity, bend_at_onset)
        for tick, status, payload in track:
            kind = status & 0xF0
            if kind == 0xE0:
                value = payload[0] | (payload[1] << 7)
                bend_semitones = (value - 8192) / 8192.0 * PITCH_BEND_RANGE_SEMITONES
            elif kind == 0x90 and payload[1] > 0:
                if open_note is not None:
                    raise NoteValidationError(
                        f"{path}: overlapping notes on string {string_index} "
                        f"at tick {tick}"
                    )
                open_note = (payload[0], tick, payload[1], bend_semitones)
            elif kind == 0x80 or (kind == 0x90 and payload[1] == 0):
                if open_note is None or open_note[0] != payload[0]:
                    continue
                number, onset_tick, velocity, bend = open_note
                events.append(
                    NoteEvent(
                        string_index=string_index,
                        onset_s=tick_to_seconds(onset_tick),
                        offset_s=tick_to_seconds(tick),
                        pitch_midi=number + bend,
                        velocity_unit=velocity / 127.0,
                    )
                )
                open_note = None
    return events


# --- one-hot conditioning ---------------------------------------------------


@dataclass
class StringwiseMidiInput:
    """One-hot conditioning tensors: pitch (6, T, 305), velocity (6, T, 64),
    string identity (6, 6). Inactive (string, frame) slices are all-zero."""

    x_pitch: np.ndarray
    x_vel: np.ndarray
    s: np.ndarray
    frame_rate: int = FRAME_RATE

    @property
    def n_frames(self):
        return self.x_pitch.shape[1]

    def active_mask(self):
        """(6, T) boolean mask of frames with an active note."""
        return self.x_pitch.sum(axis=-1) > 0

    def pitch_bins(self):
        """(6, T) int bins (argmax; only meaningful where active_mask is set)."""
        return self.x_pitch.argmax(axis=-1)

    def save(self, path):
        np.savez_compressed(
            path,
            x_pitch=self.x_pitch.astype(np.uint8),
            x_vel=self.x_vel.astype(np.uint8),
            s=self.s.astype(np.uint8),
            frame_rate=self.frame_rate,
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(
                x_pitch=data["x_pitch"].astype(np.float64),
                x_vel=data["x_vel"].astype(np.float64),
                s=data["s"].astype(np.float64),
                frame_rate=int(data["frame_rate"]),
            )


def encode_stringwise(events, duration_s) -> StringwiseMidiInput:
    """Encode note events into one-hot pitch/velocity tensors.

    A frame t (center time t/128 s) is active for a note when
    onset <= t/128 < offset. Every note needs a velocity (fill missing ones
    with :func:`velocity_proxy` first) and a pitch inside the 305-bin range.
    """
    _check_no_overlap(events)
    n_frames = int(round(duration_s * FRAME_RATE))
    x_pitch = np.zeros((N_STRINGS, n_frames, N_PITCH_BINS))
    x_vel = np.zeros((N_STRINGS, n_frames, N_VEL_BINS))
    for ev in events:
        if ev.offset_s > duration_s + 1e-9:
            raise NoteValidationError(f"note extends past clip duration {duration_s}: {ev}")
        if ev.velocity_unit is None:
            raise NoteValidationError(f"note is missing a velocity: {ev}")
        try:
            pitch_bin = quantize(scale_f0_midi(ev.pitch_midi), N_PITCH_BINS)
        except ValueError as exc:
            raise NoteValidationError(f"pitch outside the encodable range: {ev}") from exc
        vel_bin = quantize(ev.velocity_unit, N_VEL_BINS)
        start = int(np.ceil(ev.onset_s * FRAME_RATE - 1e-9))
        stop = int(np.ceil(ev.offset_s * FRAME_RATE - 1e-9))
        frames = np.arange(max(start, 0), min(stop, n_frames))
        x_pitch[ev.string_index, frames, pitch_bin] = 1.0
        x_vel[ev.string_index, frames, vel_bin] = 1.0
    return StringwiseMidiInput(x_pitch=x_pitch, x_vel=x_vel, s=np.eye(N_STRINGS))


def velocity_proxy(string_samples, note: NoteEvent, sample_rate=SAMPLE_RATE):
    """Peak unit-scaled dB(A) loudness of the note on its per-string channel."""
    string_samples = np.asarray(string_samples)
    duration_s = len(string_samples) / sample_rate
    if note.offset_s > duration_s + 1e-9 or note.onset_s >= duration_s:
        raise NoteValidationError(f"note interval outside the audio duration: {note}")
    loudness = features.extract_loudness(string_samples, sample_rate)
    start = int(np.ceil(note.onset_s * FRAME_RATE - 1e-9))
    stop = int(np.ceil(note.offset_s * FRAME_RATE - 1e-9))
    stop = min(stop, len(loudness))
    if stop <= start:  # sub-frame note: use the frame containing the onset
        start = min(int(note.onset_s * FRAME_RATE), len(loudness) - 1)
        stop = start + 1
    return float(np.clip(loudness[start:stop].max(), 0.0, 1.0))


def fill_velocities(events, string_audio, sample_rate=SAMPLE_RATE):
    """Fill missing velocities from per-string audio shaped (6, n_samples)."""
    out = []
    for ev in events:
        if ev.velocity_unit is None:
            vel = velocity_proxy(string_audio[ev.string_index], ev, sample_rate)
            ev = replace(ev, velocity_unit=vel)
        out.append(ev)
    return out
