"""Synthetic desk-scale corpora: plucked-tone recordings with note annotations.

Used by the overfit and bleed experiments, the CLI tests, and anywhere a tiny
self-contained corpus stands in for real hexaphonic recordings. Audio is a
bank of exponentially decaying harmonic tones per string, so the feature
extractor sees physically sensible contours.
"""

from __future__ import annotations

import numpy as np

from .audio_io import AudioBuffer, write_wav
from .corpus import LoadedRecording, RecordingMeta, write_catalog
from .features import FRAME_RATE, N_STRINGS, SAMPLE_RATE, extract_control_features
from .notes import NoteEvent, encode_stringwise, write_note_events

# open-string MIDI numbers, low E to high e
OPEN_STRINGS = (40, 45, 50, 55, 59, 64)


def pluck(f0_hz, duration_s, velocity, rng, sample_rate=SAMPLE_RATE, n_harmonics=8):
    """Decaying harmonic tone with a velocity-scaled amplitude."""
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    env = np.exp(-2.5 * t)
    wave = np.zeros_like(t)
    for k in range(1, n_harmonics + 1):
        if k * f0_hz >= sample_rate / 2:
            break
        phase = rng.uniform(0, 2 * np.pi)
        wave += (0.6 ** (k - 1)) * np.sin(2 * np.pi * k * f0_hz * t + phase)
    peak = np.max(np.abs(wave)) or 1.0
    return 0.6 * velocity * env * wave / peak


def random_events(duration_s, rng, active_strings=None, slot_s=0.5, rest_prob=0.25):
    """Random monophonic note sequence per string on a fixed slot grid."""
    strings = range(N_STRINGS) if active_strings is None else active_strings
    events = []
    n_slots = int(duration_s / slot_s)
    for string in strings:
        open_pitch = OPEN_STRINGS[string]
        for slot in range(n_slots):
            if rng.random() < rest_prob:
                continue
            onset = slot * slot_s + 0.01
            offset = min((slot + 1) * slot_s - 0.02, duration_s)
            pitch = float(open_pitch + rng.integers(0, 8))
            velocity = float(rng.uniform(0.5, 1.0))
            events.append(NoteEvent(string, onset, offset, pitch, velocity))
    return events


def render_events(events, duration_s, rng, sample_rate=SAMPLE_RATE):
    """Per-string channels (6, n) and the mono mixture for a note list."""
    n = int(round(duration_s * sample_rate))
    channels = np.zeros((N_STRINGS, n))
    for ev in events:
        start = int(round(ev.onset_s * sample_rate))
        tone = pluck(
            440.0 * 2 ** ((ev.pitch_midi - 69) / 12),
            ev.offset_s - ev.onset_s,
            ev.velocity_unit,
            rng,
            sample_rate,
        )
        stop = min(start + len(tone), n)
        channels[ev.string_index, start:stop] += tone[: stop - start]
    return channels, channels.sum(axis=0)


def make_recording(duration_s, seed, active_strings=None) -> LoadedRecording:
    """Self-contained in-memory recording with extracted (not synthetic) features."""
    rng = np.random.default_rng(seed)
    events = random_events(duration_s, rng, active_strings)
    channels, mix = render_events(events, duration_s, rng)
    midi = encode_stringwise(events, duration_s)
    control = extract_control_features(channels)
    n_frames = min(control.n_frames, midi.n_frames)
    return LoadedRecording(
        id=f"synthetic-{seed}",
        midi=midi,
        features=control.slice_frames(0, n_frames),
        mix=mix[: n_frames * (SAMPLE_RATE // FRAME_RATE)],
        strings=channels,
    )


def make_corpus(corpus_dir, n_recordings, duration_s=9.0, seed=0,
                n_players=2, n_progressions=2, n_styles=2):
    """Write a corpus directory of synthetic recordings; returns the catalog."""
    rng = np.random.default_rng(seed)
    metas = []
    for i in range(n_recordings):
        rec_id = f"rec{i:03d}"
        rec_dir = corpus_dir / rec_id
        rec_dir.mkdir(parents=True, exist_ok=True)
        events = random_events(duration_s, rng)
        channels, mix = render_events(events, duration_s, rng)
        write_wav(rec_dir / "mix.wav", AudioBuffer(mix))
        write_wav(rec_dir / "strings.wav", AudioBuffer(channels))
        write_note_events(events, rec_dir / "notes.jsonl")
        metas.append(
            RecordingMeta(
                id=rec_id,
                player=f"player{i % n_players}",
                progression=f"prog{(i // n_players) % n_progressions}",
                style=f"style{(i // (n_players * n_progressions)) % n_styles}",
            )
        )
    write_catalog(corpus_dir, metas)
    return metas


def guitarset_shaped_catalog():
    """360 synthetic recording metas shaped like the full corpus:
    6 players x 3 progressions x 5 styles x (2 tempi x solo/comp)."""
    metas = []
    i = 0
    for player in range(6):
        for prog in range(3):
            for style in range(5):
                for _ in range(4):
                    metas.append(
                        RecordingMeta(
                            id=f"r{i:04d}",
                            player=f"pl{player}",
                            progression=f"pr{prog}",
                            style=f"st{style}",
                        )
                    )
                    i += 1
    return metas
