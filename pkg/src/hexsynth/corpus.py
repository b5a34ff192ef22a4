"""Corpus layout and per-recording loading.

A corpus directory holds one subdirectory per recording plus a catalog:

    corpus/
      catalog.json                 [{"id", "player", "progression", "style"}, ...]
      <recording_id>/mix.wav       mono microphone mixture, 48 kHz
      <recording_id>/strings.wav   6-channel per-string audio
      <recording_id>/notes.jsonl   string-wise note annotations

Feature extraction writes per-recording caches (<id>.features.npz and
<id>.midi.npz) into a cache directory; extraction is skipped when the cache
is newer than its sources.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as feat
from .audio_io import read_wav
from .features import ControlFeatures
from .notes import StringwiseMidiInput, encode_stringwise, fill_velocities, parse_note_events

CACHE_ENV_VAR = "HEXSYNTH_CACHE"


@dataclass(frozen=True)
class RecordingMeta:
    id: str
    player: str
    progression: str
    style: str


@dataclass
class LoadedRecording:
    """In-memory recording: conditioning, target features and mixture audio."""

    id: str
    midi: StringwiseMidiInput
    features: ControlFeatures
    mix: np.ndarray  # (n_samples,)
    strings: np.ndarray | None = None  # (6, n_samples) when loaded

    @property
    def n_frames(self):
        return self.features.n_frames

    @property
    def n_samples(self):
        return len(self.mix)


def load_catalog(corpus_dir):
    path = Path(corpus_dir) / "catalog.json"
    if not path.exists():
        raise FileNotFoundError(f"no catalog.json in {corpus_dir}")
    records = json.loads(path.read_text())
    return [
        RecordingMeta(
            id=r["id"], player=r["player"], progression=r["progression"], style=r["style"]
        )
        for r in records
    ]


def write_catalog(corpus_dir, metas):
    path = Path(corpus_dir) / "catalog.json"
    path.write_text(json.dumps([vars(m) for m in metas], indent=2))


def default_cache_dir(corpus_dir):
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env) / Path(corpus_dir).resolve().name
    return Path(corpus_dir) / "features"


def _cache_paths(cache_dir, recording_id):
    cache_dir = Path(cache_dir)
    return cache_dir / f"{recording_id}.features.npz", cache_dir / f"{recording_id}.midi.npz"


def cache_is_fresh(corpus_dir, cache_dir, recording_id):
    rec_dir = Path(corpus_dir) / recording_id
    feat_path, midi_path = _cache_paths(cache_dir, recording_id)
    if not feat_path.exists() or not midi_path.exists():
        return False
    newest_source = max(
        p.stat().st_mtime
        for p in (rec_dir / "mix.wav", rec_dir / "strings.wav", rec_dir / "notes.jsonl")
        if p.exists()
    )
    return min(feat_path.stat().st_mtime, midi_path.stat().st_mtime) >= newest_source


def extract_recording(corpus_dir, cache_dir, recording_id, force=False):
    """Extract and cache control features + one-hot MIDI for one recording.

    Returns True when work was done, False when the cache was fresh.
    """
    rec_dir = Path(corpus_dir) / recording_id
    if not force and cache_is_fresh(corpus_dir, cache_dir, recording_id):
        return False
    strings = read_wav(rec_dir / "strings.wav")
    if strings.samples.ndim != 2 or strings.samples.shape[0] != feat.N_STRINGS:
        raise ValueError(
            f"{recording_id}: strings.wav must have 6 channels, "
            f"got shape {strings.samples.shape}"
        )
    events = parse_note_events(rec_dir / "notes.jsonl")
    events = fill_velocities(events, strings.samples, strings.sample_rate)
    duration_s = strings.samples.shape[1] / strings.sample_rate
    midi = encode_stringwise(events, duration_s)
    control = feat.extract_control_features(strings.samples, strings.sample_rate)

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    feat_path, midi_path = _cache_paths(cache_dir, recording_id)
    control.save(feat_path)
    midi.save(midi_path)
    return True


def load_recording(corpus_dir, cache_dir, recording_id, with_strings=False) -> LoadedRecording:
    """Load a recording's mixture plus its cached features and MIDI tensors."""
    feat_path, midi_path = _cache_paths(cache_dir, recording_id)
    if not feat_path.exists() or not midi_path.exists():
        raise FileNotFoundError(
            f"no feature cache for '{recording_id}' in {cache_dir}; run extraction first"
        )
    rec_dir = Path(corpus_dir) / recording_id
    mix = read_wav(rec_dir / "mix.wav")
    control = ControlFeatures.load(feat_path)
    midi = StringwiseMidiInput.load(midi_path)
    n_frames = min(control.n_frames, midi.n_frames)
    strings = None
    if with_strings:
        strings = read_wav(rec_dir / "strings.wav").samples
    return LoadedRecording(
        id=recording_id,
        midi=StringwiseMidiInput(
            x_pitch=midi.x_pitch[:, :n_frames],
            x_vel=midi.x_vel[:, :n_frames],
            s=midi.s,
        ),
        features=control.slice_frames(0, n_frames),
        mix=mix.samples[: n_frames * feat.HOP],
        strings=strings,
    )
