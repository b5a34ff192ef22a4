"""Objective evaluation: per-window spectral loss, semitone pitch accuracy
against two references, F0-contour comparison plots, and the synthetic
bleed experiment contrasting regression and classification control models.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import features as feat
from . import losses
from .features import (
    _MIDI_LO,
    _MIDI_SPAN,
    FRAME_RATE,
    N_PITCH_BINS,
    N_STRINGS,
    SAMPLE_RATE,
    scale_f0_midi,
)
from .models import ModelConfig, argmax_decode, build_model, midi_input_tensor
from .notes import NoteEvent, StringwiseMidiInput, encode_stringwise
from .training import TrainConfig, TrainData, train_control

METRIC_WINDOW_S = 8.0


def unit_to_midi(unit):
    return np.asarray(unit) * _MIDI_SPAN + _MIDI_LO


def semitones_from_unit(unit):
    """Unit-scale F0 to nearest integer MIDI number (banker's rounding)."""
    return np.round(unit_to_midi(unit)).astype(np.int64)


def eval_mssl(natural, rendered, window_s=METRIC_WINDOW_S, sample_rate=SAMPLE_RATE):
    """Spectral loss over non-overlapping metric windows; returns
    (per-window list, mean). The final partial window is dropped."""
    natural = np.asarray(natural, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if natural.shape != rendered.shape:
        raise ValueError(
            f"duration mismatch: {natural.shape} vs {rendered.shape}"
        )
    win = int(window_s * sample_rate)
    n_windows = len(natural) // win
    values = []
    with torch.no_grad():
        for i in range(n_windows):
            seg = slice(i * win, (i + 1) * win)
            values.append(
                float(losses.mssl(
                    torch.as_tensor(natural[seg]), torch.as_tensor(rendered[seg])
                ))
            )
    mean = float(np.mean(values)) if values else float("nan")
    return values, mean


def _estimated_semitones(string_audio):
    out = []
    for channel in np.asarray(string_audio, dtype=np.float64):
        unit, _ = feat.estimate_f0_periodicity(channel)
        out.append(semitones_from_unit(unit))
    return np.stack(out)


def midi_reference_semitones(midi: StringwiseMidiInput):
    """Semitone reference decoded from the one-hot input pitch bins."""
    centers = (midi.pitch_bins().astype(np.float64) + 0.5) / N_PITCH_BINS
    return semitones_from_unit(centers)


def pitch_accuracy(rendered_strings, midi: StringwiseMidiInput, mode="midi",
                   natural_strings=None):
    """Semitone pitch accuracy of rendered per-string channels.

    F0 is estimated per string from the rendered audio, converted to MIDI
    numbers and rounded to semitones; only frames with an active input MIDI
    note on the corresponding string are kept. The reference is either the
    semitone-quantized input MIDI pitch (``mode="midi"``) or semitones
    estimated from the natural per-string audio (``mode="crepe"``). Returns
    None when no frames are active.
    """
    if mode not in ("midi", "crepe"):
        raise ValueError(f"unknown pitch accuracy mode: {mode!r}")
    estimated = _estimated_semitones(rendered_strings)
    n_frames = min(estimated.shape[1], midi.n_frames)
    mask = midi.active_mask()[:, :n_frames]
    if mode == "midi":
        reference = midi_reference_semitones(midi)[:, :n_frames]
    else:
        if natural_strings is None:
            raise ValueError("crepe mode needs the natural per-string audio")
        reference = _estimated_semitones(natural_strings)[:, :n_frames]
    estimated = estimated[:, :n_frames]
    if not mask.any():
        return None
    return float((estimated[mask] == reference[mask]).mean())


def plot_f0_comparison(predictions, target_unit, midi: StringwiseMidiInput,
                       string_index, out_path):
    """Overlay predicted F0 contours against the target contour and the input
    MIDI pitch for one string, with neighboring strings' MIDI for context.

    ``predictions`` maps system name -> unit contour (T,). Returns the
    plotted series (MIDI numbers with NaN gaps) keyed by label.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(len(target_unit)) / FRAME_RATE
    midi_ref = midi_reference_semitones(midi).astype(np.float64)
    active = midi.active_mask()

    series = {"target F0": unit_to_midi(target_unit)}
    for name, contour in predictions.items():
        series[f"predicted F0 ({name})"] = unit_to_midi(contour)
    own = midi_ref[string_index].copy()
    own[~active[string_index]] = np.nan
    series[f"MIDI pitch (string {string_index})"] = own[: len(t)]
    for neighbor in (string_index - 1, string_index + 1):
        if 0 <= neighbor < N_STRINGS and active[neighbor].any():
            row = midi_ref[neighbor].copy()
            row[~active[neighbor]] = np.nan
            series[f"MIDI pitch (string {neighbor})"] = row[: len(t)]

    fig, ax = plt.subplots(figsize=(9, 4))
    for label, values in series.items():
        style = "--" if label.startswith("MIDI") else "-"
        ax.plot(t[: len(values)], values[: len(t)], style, label=label, linewidth=1.2)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("pitch (MIDI number)")
    ax.set_xlim(0.0, len(target_unit) / FRAME_RATE)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return series


@dataclass
class RecordingEval:
    recording_id: str
    mssl_windows: list
    mssl_mean: float
    crepe_acc: float | None
    midi_acc: float | None


@dataclass
class EvalReport:
    system: str
    checkpoint: str
    split: str
    recordings: list = field(default_factory=list)

    def aggregate(self):
        def mean_of(key):
            vals = [getattr(r, key) for r in self.recordings if getattr(r, key) is not None]
            return float(np.mean(vals)) if vals else None
        return {
            "mssl": mean_of("mssl_mean"),
            "crepe_acc": mean_of("crepe_acc"),
            "midi_acc": mean_of("midi_acc"),
        }

    def to_dict(self):
        return {
            "system": self.system,
            "checkpoint": self.checkpoint,
            "split": self.split,
            "aggregate": self.aggregate(),
            "recordings": [asdict(r) for r in self.recordings],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def summary_table(self):
        agg = self.aggregate()
        def fmt(v, pattern="{:.2f}"):
            return pattern.format(v) if v is not None else "-"
        lines = [
            f"{'system':<12} {'MSSL':>8} {'CREPE acc.':>12} {'MIDI acc.':>10}",
            f"{self.system:<12} {fmt(agg['mssl']):>8} "
            f"{fmt(agg['crepe_acc']):>12} {fmt(agg['midi_acc']):>10}",
        ]
        return "\n".join(lines)


# --- bleed experiment ---------------------------------------------------------

BLEED_STRINGS = (2, 3)
BLEED_PITCHES = {2: (50, 52, 54), 3: (57, 59, 61)}


def _bleed_recording(rng, duration_s, corruption_rate, chunk_frames=8):
    """One synthetic two-string recording with bleed-corrupted F0 targets.

    Both strings play continuous slot-grid notes; with probability
    ``corruption_rate`` per chunk, a corrupted chunk of the target F0 jumps
    to the concurrent pitch of the other active string (simulated bleed).
    """
    from .corpus import LoadedRecording

    slot_s = 0.25
    n_frames = int(round(duration_s * FRAME_RATE))
    events = []
    for string in BLEED_STRINGS:
        for slot in range(int(duration_s / slot_s)):
            pitch = float(rng.choice(BLEED_PITCHES[string]))
            events.append(NoteEvent(
                string, slot * slot_s + 0.005, (slot + 1) * slot_s - 0.005,
                pitch, 0.75,
            ))
    midi = encode_stringwise(events, duration_s)

    f0 = np.zeros((N_STRINGS, n_frames))
    l = np.zeros((N_STRINGS, n_frames))
    p = np.zeros((N_STRINGS, n_frames))
    c = np.full((N_STRINGS, n_frames), 0.3)
    true_units = np.zeros((N_STRINGS, n_frames))
    for ev in events:
        start = int(np.ceil(ev.onset_s * FRAME_RATE - 1e-9))
        stop = int(np.ceil(ev.offset_s * FRAME_RATE - 1e-9))
        unit = scale_f0_midi(ev.pitch_midi)
        true_units[ev.string_index, start:stop] = unit
        f0[ev.string_index, start:stop] = unit
        l[ev.string_index, start:stop] = 0.75
        p[ev.string_index, start:stop] = 0.9

    other = {BLEED_STRINGS[0]: BLEED_STRINGS[1], BLEED_STRINGS[1]: BLEED_STRINGS[0]}
    if corruption_rate > 0:
        for string in BLEED_STRINGS:
            neighbor = other[string]
            for chunk_start in range(0, n_frames, chunk_frames):
                if rng.random() >= corruption_rate:
                    continue
                chunk = slice(chunk_start, min(chunk_start + chunk_frames, n_frames))
                neighbor_units = true_units[neighbor, chunk]
                own_active = l[string, chunk] > 0
                usable = own_active & (neighbor_units > 0)
                f0[string, chunk][usable] = neighbor_units[usable]

    control = feat.ControlFeatures(f0=f0, l=l, p=p, c=c)
    return LoadedRecording(
        id=f"bleed-{rng.integers(1 << 30)}",
        midi=midi,
        features=control,
        mix=np.zeros(n_frames * (SAMPLE_RATE // FRAME_RATE)),
    )


def _contour_accuracy(model, kind, recordings):
    """MIDI-mode semitone accuracy of predicted F0 contours."""
    correct = total = 0
    with torch.no_grad():
        for rec in recordings:
            x = midi_input_tensor(rec.midi, dtype=next(model.parameters()).dtype)
            if kind == "rg":
                contour = model(x)["f0"].numpy()
            else:
                contour = argmax_decode(model(x)["F0"]).numpy()
            mask = rec.midi.active_mask()
            est = semitones_from_unit(contour)
            ref = midi_reference_semitones(rec.midi)
            correct += int((est[mask] == ref[mask]).sum())
            total += int(mask.sum())
    return correct / total if total else None


def bleed_experiment(seed=0, corruption_rate=0.3, n_train=10, n_eval=4,
                     duration_s=4.0, max_epochs=150):
    """Train rg and cl control models on bleed-corrupted targets and compare
    held-out MIDI-mode pitch accuracy. The experiment is its own oracle:
    classification must match or beat regression.
    """
    rng = np.random.default_rng(seed)
    train = [_bleed_recording(rng, duration_s, corruption_rate) for _ in range(n_train)]
    val = [_bleed_recording(rng, duration_s, corruption_rate) for _ in range(2)]
    held_out = [_bleed_recording(rng, duration_s, 0.0) for _ in range(n_eval)]

    model_config = ModelConfig(
        hidden_size=32, n_recurrent_layers=2, n_attention_heads=2,
        seed=seed, dtype="float64",
    )
    train_config = TrainConfig(
        learning_rate=3e-3, lr_decay=1.0, patience=15, excerpt_s=duration_s,
        batch_size=2, max_epochs=max_epochs, seed=seed, dtype="float64",
    )
    data = TrainData(train=train, val=val)

    accuracies = {}
    epochs = {}
    for mode in ("rg", "cl"):
        result = train_control(data, train_config, model_config, mode=mode)
        model = result.checkpoint.build_module(f"control_{mode}")
        model.eval()
        accuracies[mode] = _contour_accuracy(model, mode, held_out)
        epochs[mode] = len(result.history)

    report = {
        "corruption_rate": corruption_rate,
        "accuracy_rg": accuracies["rg"],
        "accuracy_cl": accuracies["cl"],
        "gap": accuracies["cl"] - accuracies["rg"],
        "n_train": n_train,
        "n_eval": n_eval,
        "epochs": epochs,
        "seed": seed,
    }
    assert accuracies["cl"] >= accuracies["rg"], (
        f"classification accuracy {accuracies['cl']:.3f} fell below "
        f"regression accuracy {accuracies['rg']:.3f}"
    )
    return report
