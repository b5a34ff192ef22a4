"""Dataset splitting, excerpt sampling and the four training procedures.

All trainers share one loop: Adam (beta1 = 0.99), per-epoch learning-rate
decay of 0.99, gradient clipping at global norm 3, early stopping on
validation loss with a patience of 5 epochs, and the best-validation
parameter snapshot returned. An epoch is one pass over one random excerpt
per training recording.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .corpus import LoadedRecording
from .features import FRAME_RATE, HOP, K_BINS, N_PITCH_BINS, quantize
from .models import (
    Checkpoint,
    ModelConfig,
    argmax_decode,
    build_model,
    control_input_tensor,
    midi_input_tensor,
    save_checkpoint,
)
from .notes import StringwiseMidiInput
from .synth import ReverbBank, synthesize

LEARNING_RATE_PRESETS = {
    "synthesis": 3e-4,
    "control": 1e-4,
    "joint": 1e-4,
    "unified": 1e-4,
}


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


class ConfigurationError(ValueError):
    """Invalid split or training configuration."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.99
    adam_beta2: float = 0.999
    lr_decay: float = 0.99
    patience: int = 5
    excerpt_s: float = 8.0
    batch_size: int = 2
    max_epochs: int = 50
    grad_clip: float = 3.0
    seed: int = 0
    dtype: str = "float64"
    num_threads: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay <= 0:
            raise ValueError("rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    @property
    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    @classmethod
    def preset(cls, system, **overrides):
        if system not in LEARNING_RATE_PRESETS:
            raise ValueError(f"unknown training preset: {system!r}")
        return cls(learning_rate=LEARNING_RATE_PRESETS[system], **overrides)


# --- dataset splitting --------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    aliases: dict

    def to_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test,
                "aliases": self.aliases}

    @classmethod
    def from_dict(cls, d):
        return cls(train=d["train"], val=d["val"], test=d["test"], aliases=d["aliases"])


def split_dataset(catalog, seed=0, test_fraction=0.1, val_fraction=0.05) -> DatasetSplit:
    """Triple-disjoint dataset split with alias-based balanced test selection.

    Random aliases are assigned to players, progressions and styles; whole
    (player, progression, style) triples go to either test or development, so
    no triple spans both. Test triples are chosen greedily to balance alias
    diversity across the three factors. Validation is a random subset of the
    development recordings. Under a 360-recording catalog the sizes are
    36 / 18 / 306.
    """
    if not catalog:
        raise ConfigurationError("empty catalog")
    rng = np.random.default_rng(seed)

    aliases = {}
    for factor in ("player", "progression", "style"):
        values = sorted({getattr(m, factor) for m in catalog})
        codes = rng.permutation(len(values))
        aliases[factor] = {v: f"{factor[0]}{codes[i]:03d}" for i, v in enumerate(values)}

    triples = {}
    for meta in catalog:
        key = (
            aliases["player"][meta.player],
            aliases["progression"][meta.progression],
            aliases["style"][meta.style],
        )
        triples.setdefault(key, []).append(meta.id)

    n_total = len(catalog)
    target_test = round(n_total * test_fraction)
    target_val = round(n_total * val_fraction)
    if target_test < 1 or n_total - target_test - target_val < 1:
        raise ConfigurationError(
            f"catalog of {n_total} recordings is too small for a "
            f"{test_fraction:.0%}/{val_fraction:.0%} test/val split"
        )

    # Greedy balanced packing: repeatedly take the triple whose factor
    # aliases are least represented in the test set so far.
    order = sorted(triples)
    rng.shuffle(order)
    usage = [dict(), dict(), dict()]
    test_ids, test_size = [], 0
    remaining = list(order)
    while test_size < target_test:
        candidates = [k for k in remaining if test_size + len(triples[k]) <= target_test]
        if not candidates:
            raise ConfigurationError(
                f"cannot reach a test split of exactly {target_test} recordings "
                f"with whole (player, progression, style) triples"
            )
        best = min(
            candidates,
            key=lambda k: (sum(usage[i].get(k[i], 0) for i in range(3)), remaining.index(k)),
        )
        remaining.remove(best)
        for i in range(3):
            usage[i][best[i]] = usage[i].get(best[i], 0) + 1
        test_ids.extend(triples[best])
        test_size += len(triples[best])

    dev_ids = [rid for key in remaining for rid in triples[key]]
    dev_ids.sort()
    val_ids = sorted(rng.choice(dev_ids, size=target_val, replace=False).tolist())
    train_ids = sorted(set(dev_ids) - set(val_ids))

    flat_aliases = {
        factor: dict(mapping) for factor, mapping in aliases.items()
    }
    return DatasetSplit(
        train=train_ids, val=val_ids, test=sorted(test_ids), aliases=flat_aliases
    )


# --- excerpt sampling ---------------------------------------------------------


@dataclass
class Excerpt:
    recording_id: str
    frame_offset: int
    midi: StringwiseMidiInput
    features: dict  # f0/l/p/c tensors (S, T)
    audio: torch.Tensor  # (T * HOP,)


def _features_to_tensors(features, frame_slice, dtype):
    return {
        k: torch.as_tensor(getattr(features, k)[:, frame_slice], dtype=dtype)
        for k in ("f0", "l", "p", "c")
    }


def sample_excerpt(recording: LoadedRecording, rng, excerpt_s=8.0,
                   dtype=torch.float64, offset_frames=None):
    """Cut an aligned (MIDI, features, audio) excerpt at a random frame offset.

    Returns None (with a warning) for recordings shorter than the excerpt.
    """
    n_frames = int(round(excerpt_s * FRAME_RATE))
    total = recording.n_frames
    if total < n_frames:
        warnings.warn(
            f"recording '{recording.id}' is shorter than the {excerpt_s:g} s "
            f"excerpt; skipping"
        )
        return None
    if offset_frames is None:
        offset_frames = int(rng.integers(0, total - n_frames + 1))
    fs = slice(offset_frames, offset_frames + n_frames)
    ss = slice(offset_frames * HOP, (offset_frames + n_frames) * HOP)
    midi = StringwiseMidiInput(
        x_pitch=recording.midi.x_pitch[:, fs],
        x_vel=recording.midi.x_vel[:, fs],
        s=recording.midi.s,
    )
    return Excerpt(
        recording_id=recording.id,
        frame_offset=offset_frames,
        midi=midi,
        features=_features_to_tensors(recording.features, fs, dtype),
        audio=torch.as_tensor(recording.mix[ss], dtype=dtype),
    )


@dataclass
class TrainData:
    train: list  # of LoadedRecording
    val: list


# --- shared training loop -----------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    best_epoch: int
    total_steps: int


def _snapshot(modules):
    return {
        key: {name: t.detach().clone() for name, t in module.state_dict().items()}
        for key, module in modules.items()
    }


def _restore(modules, snapshot):
    for key, module in modules.items():
        module.load_state_dict(snapshot[key])


def _noise_seed(config, step):
    return (config.seed * 1_000_003 + step) % (2**31 - 1)


def _run_training(modules, loss_fn, data: TrainData, config: TrainConfig,
                  model_config: ModelConfig, run_dir=None, checkpoint_name="best.npz"):
    """Shared optimizer loop; ``loss_fn(excerpt, noise_seed) -> LossBreakdown``.

    All modules are snapshotted and checkpointed; only parameters with
    ``requires_grad`` are optimized. With no validation recordings, the epoch
    training loss drives early stopping and best-state selection.
    """
    torch.set_num_threads(config.num_threads)
    torch.manual_seed(config.seed)
    params = [p for m in modules.values() for p in m.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        params, lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2)
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_decay)
    rng = np.random.default_rng(config.seed)

    run_dir = Path(run_dir) if run_dir is not None else None
    losses_log = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        losses_log = open(run_dir / "losses.jsonl", "w")

    best_val = float("inf")
    best_state = _snapshot(modules)
    best_epoch = -1
    epochs_since_improve = 0
    history = []
    step = 0
    try:
        for epoch in range(config.max_epochs):
            order = rng.permutation(len(data.train))
            excerpts = []
            for idx in order:
                ex = sample_excerpt(
                    data.train[idx], rng, config.excerpt_s, config.torch_dtype
                )
                if ex is not None:
                    excerpts.append(ex)
            if not excerpts:
                raise ConfigurationError("no training recording is long enough")

            epoch_losses = []
            for start in range(0, len(excerpts), config.batch_size):
                batch = excerpts[start : start + config.batch_size]
                optimizer.zero_grad()
                breakdowns = [loss_fn(ex, _noise_seed(config, step)) for ex in batch]
                loss = sum(b.total for b in breakdowns) / len(breakdowns)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite training loss at step {step} "
                        f"(epoch {epoch}, lr {scheduler.get_last_lr()[0]:.3e}): {loss}"
                    )
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
                if losses_log is not None:
                    entry = {"step": step, "total": float(loss.detach()),
                             "components": {k: float(v.detach()) for k, v in
                                            breakdowns[0].components.items()}}
                    losses_log.write(json.dumps(entry) + "\n")
                step += 1

            val_losses = []
            with torch.no_grad():
                for rec in data.val:
                    ex = sample_excerpt(
                        rec, rng, config.excerpt_s, config.torch_dtype, offset_frames=0
                    )
                    if ex is not None:
                        val_losses.append(float(loss_fn(ex, _noise_seed(config, -1)).total))
            val_loss = float(np.mean(val_losses)) if val_losses else float(np.mean(epoch_losses))

            history.append({
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val_loss,
                "lr": scheduler.get_last_lr()[0],
                "step": step,
            })
            if run_dir is not None:
                with open(run_dir / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(history[-1]) + "\n")

            if val_loss < best_val:
                best_val = val_loss
                best_state = _snapshot(modules)
                best_epoch = epoch
                epochs_since_improve = 0
            else:
                epochs_since_improve += 1
                if epochs_since_improve >= config.patience:
                    break
            scheduler.step()
    finally:
        if losses_log is not None:
            losses_log.close()

    _restore(modules, best_state)
    checkpoint_path = None
    if run_dir is not None:
        checkpoint_path = run_dir / checkpoint_name
        save_checkpoint(
            checkpoint_path, model_config, modules,
            training_step=step, validation_loss=best_val,
        )
    ckpt = Checkpoint(
        config=model_config,
        parameters={
            key: {name: t.numpy().copy() for name, t in module.state_dict().items()}
            for key, module in modules.items()
        },
        training_step=step,
        validation_loss=best_val,
    )
    return TrainResult(
        checkpoint=ckpt, history=history, best_epoch=best_epoch, total_steps=step
    )


# --- per-system loss assembly ---------------------------------------------------


def _quantized_f0_target(f0, n_bins=N_PITCH_BINS):
    bins = torch.as_tensor(quantize(f0.numpy(), n_bins))
    return torch.nn.functional.one_hot(bins, n_bins).to(f0.dtype)


def _quantized_targets(feats):
    out = {}
    for key, src, bins in (
        ("F0", "f0", N_PITCH_BINS), ("L", "l", K_BINS),
        ("P", "p", K_BINS), ("C", "c", K_BINS),
    ):
        idx = torch.as_tensor(quantize(feats[src].numpy(), bins))
        out[key] = torch.nn.functional.one_hot(idx, bins).to(feats[src].dtype)
    return out


def train_synthesis(data: TrainData, config: TrainConfig, model_config: ModelConfig,
                    run_dir=None) -> TrainResult:
    """Decoder + reverb on ground-truth control features, spectral loss only."""
    decoder = build_model("decoder", model_config)
    reverb = ReverbBank(seed=model_config.seed, dtype=model_config.torch_dtype)
    modules = {"decoder": decoder, "reverb": reverb}

    def loss_fn(ex: Excerpt, noise_seed):
        x = control_input_tensor(
            ex.features["f0"], ex.features["l"], ex.features["p"], ex.features["c"],
            dtype=config.torch_dtype,
        )
        params = decoder(x)
        mix, _ = synthesize(params, ex.features["f0"], reverb, noise_seed=noise_seed)
        return losses.LossBreakdown.from_components({"mssl": losses.mssl(ex.audio, mix)})

    return _run_training(modules, loss_fn, data, config, model_config, run_dir)


def train_control(data: TrainData, config: TrainConfig, model_config: ModelConfig,
                  mode="rg", run_dir=None) -> TrainResult:
    """Control model on MIDI -> feature prediction (regression or classification)."""
    if mode not in ("rg", "cl"):
        raise ValueError(f"unknown control mode: {mode!r}")
    kind = f"control_{mode}"
    model = build_model(kind, model_config)
    modules = {kind: model}

    def loss_fn(ex: Excerpt, noise_seed):
        x = midi_input_tensor(ex.midi, dtype=config.torch_dtype)
        if mode == "rg":
            pred = model(x)
            return losses.loss_regression(pred, ex.features)
        pred = model(x)
        targets = _quantized_targets(ex.features)
        return losses.loss_classification(
            pred, targets, ex.features["l"], ex.features["p"]
        )

    return _run_training(modules, loss_fn, data, config, model_config, run_dir)


def train_joint(data: TrainData, config: TrainConfig, syn_checkpoint: Checkpoint,
                model_config: ModelConfig = None, run_dir=None,
                freeze_synthesis=False) -> TrainResult:
    """Joint training of a hybrid control model with a pre-trained synthesis model.

    The F0 path is argmax-decoded (gradient barrier): the F0 head learns only
    from its classification term while l/p/c heads receive spectral gradient.
    The control model shares the synthesis checkpoint's architecture config
    (one config per checkpoint), so the whole (control, decoder, reverb)
    bundle reloads from a single file.
    """
    if model_config is None:
        model_config = replace(syn_checkpoint.config, dtype=config.dtype)
    else:
        shape_fields = ("hidden_size", "n_recurrent_layers", "n_harmonics", "n_noise_bands")
        for name in shape_fields:
            if getattr(model_config, name) != getattr(syn_checkpoint.config, name):
                raise ConfigurationError(
                    f"joint training config must match the synthesis checkpoint "
                    f"({name}: {getattr(model_config, name)} vs "
                    f"{getattr(syn_checkpoint.config, name)})"
                )
    control = build_model("control_jt", model_config)
    decoder = syn_checkpoint.build_module("decoder").to(model_config.torch_dtype)
    reverb = syn_checkpoint.build_module("reverb").to(model_config.torch_dtype)
    modules = {"control_jt": control, "decoder": decoder, "reverb": reverb}
    if freeze_synthesis:
        for module in (decoder, reverb):
            for p in module.parameters():
                p.requires_grad_(False)

    def loss_fn(ex: Excerpt, noise_seed):
        x = midi_input_tensor(ex.midi, dtype=config.torch_dtype)
        f0_probs, scalars = control(x)
        f0_decoded = argmax_decode(f0_probs)
        dec_in = control_input_tensor(
            f0_decoded, scalars["l"], scalars["p"], scalars["c"], dtype=config.torch_dtype
        )
        params = decoder(dec_in)
        mix, _ = synthesize(params, f0_decoded, reverb, noise_seed=noise_seed)
        f0_term = losses.classification_f0_term(
            f0_probs, _quantized_f0_target(ex.features["f0"]),
            ex.features["l"], ex.features["p"],
        )
        return losses.loss_joint(f0_term, ex.audio, mix)

    return _run_training(modules, loss_fn, data, config, model_config, run_dir)


def train_unified(data: TrainData, config: TrainConfig, model_config: ModelConfig,
                  run_dir=None) -> TrainResult:
    """Single network predicting synthesis parameters plus an F0 head."""
    model = build_model("unified", model_config)
    reverb = ReverbBank(seed=model_config.seed, dtype=model_config.torch_dtype)
    modules = {"unified": model, "reverb": reverb}

    def loss_fn(ex: Excerpt, noise_seed):
        x = midi_input_tensor(ex.midi, dtype=config.torch_dtype)
        f0_probs, params = model(x)
        f0_decoded = argmax_decode(f0_probs)
        mix, _ = synthesize(params, f0_decoded, reverb, noise_seed=noise_seed)
        f0_term = losses.classification_f0_term(
            f0_probs, _quantized_f0_target(ex.features["f0"]),
            ex.features["l"], ex.features["p"],
        )
        return losses.loss_unified(f0_term, ex.audio, mix)

    return _run_training(modules, loss_fn, data, config, model_config, run_dir)
