"""Networks mapping string-wise MIDI to control features or synthesis
parameters.

All models share one backbone: an input projection, a stack of bidirectional
LSTM blocks over time (strings folded into the batch, so every string is
processed by the same weights), and, for the control-side models, one
multi-head self-attention block across the six strings inserted midway
through the stack. The synthesis decoder omits the attention block and
treats strings fully independently given the string one-hot.

Tensor convention: model forwards take (B, S, T, F) and also accept the
unbatched (S, T, F) layout, returning matching shapes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .features import K_BINS, N_PITCH_BINS, N_STRINGS, N_VEL_BINS
from .synth import N_HARMONICS, N_NOISE_BANDS, REVERB_LENGTH, ReverbBank, SynthesisParams, exp_sigmoid

CHECKPOINT_VERSION = 1

#: paper-preset recurrent depth per model kind, chosen to land within 10% of
#: the reported parameter counts (53.7M control / 18.2M decoder / 89.7M unified).
_PAPER_LAYERS = {"control": 11, "decoder": 4, "unified": 19}


@dataclass
class ModelConfig:
    hidden_size: int = 64
    n_recurrent_layers: int = 2
    n_attention_heads: int = 2
    n_pitch_bins: int = N_PITCH_BINS
    n_vel_bins: int = N_VEL_BINS
    k_bins: int = K_BINS
    n_harmonics: int = N_HARMONICS
    n_noise_bands: int = N_NOISE_BANDS
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("hidden_size", "n_recurrent_layers", "n_attention_heads",
                     "n_pitch_bins", "n_vel_bins", "k_bins", "n_harmonics",
                     "n_noise_bands"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    @classmethod
    def preset(cls, name, kind="control", **overrides):
        """Named presets: "desk" (hidden 64) and "paper" (hidden 512)."""
        if name == "desk":
            cfg = cls(hidden_size=64, n_recurrent_layers=2, n_attention_heads=2)
        elif name == "paper":
            cfg = cls(
                hidden_size=512,
                n_recurrent_layers=_PAPER_LAYERS[kind],
                n_attention_heads=8,
            )
        else:
            raise ValueError(f"unknown preset: {name!r} (expected 'desk' or 'paper')")
        return replace(cfg, **overrides)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _ensure_batch(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


def _init_parameters(module, seed, hidden_size):
    """Uniform fan-in init with an explicit generator for reproducibility.

    Normalization layers keep their ones/zeros defaults.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in module.named_parameters():
        if "norm" in name:
            continue
        bound = 1.0 / np.sqrt(param.shape[-1] if param.dim() >= 2 else hidden_size)
        with torch.no_grad():
            param.uniform_(-bound, bound, generator=gen)


class _RecurrentBlock(nn.Module):
    def __init__(self, hidden_size):
        super().__init__()
        self.lstm = nn.LSTM(hidden_size, hidden_size, batch_first=True, bidirectional=True)
        self.merge = nn.Linear(2 * hidden_size, hidden_size)

    def forward(self, x):
        out, _ = self.lstm(x)
        return self.merge(out)


class _StringAttention(nn.Module):
    """Self-attention with the strings as sequence positions, per frame."""

    def __init__(self, hidden_size, n_heads):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden_size, n_heads, batch_first=True)
        self.norm = nn.LayerNorm(hidden_size)

    def forward(self, x):
        b, s, t, h = x.shape
        flat = x.permute(0, 2, 1, 3).reshape(b * t, s, h)
        mixed, _ = self.attn(flat, flat, flat, need_weights=False)
        flat = self.norm(flat + mixed)
        return flat.reshape(b, t, s, h).permute(0, 2, 1, 3)


class _Backbone(nn.Module):
    def __init__(self, in_dim, config: ModelConfig, with_attention):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, config.hidden_size)
        self.blocks = nn.ModuleList(
            _RecurrentBlock(config.hidden_size) for _ in range(config.n_recurrent_layers)
        )
        self.attention = (
            _StringAttention(config.hidden_size, config.n_attention_heads)
            if with_attention else None
        )
        # Attention sits midway through the recurrent stack.
        self.attention_after = (config.n_recurrent_layers - 1) // 2

    def forward(self, x):
        b, s, t, _ = x.shape
        h = self.in_proj(x)
        for i, block in enumerate(self.blocks):
            h = block(h.reshape(b * s, t, -1)).reshape(b, s, t, -1)
            if self.attention is not None and i == self.attention_after:
                h = self.attention(h)
        return h


def midi_input_tensor(midi, dtype=torch.float64):
    """StringwiseMidiInput -> (S, T, n_pitch + n_vel + S) conditioning tensor."""
    x_pitch = torch.as_tensor(midi.x_pitch, dtype=dtype)
    x_vel = torch.as_tensor(midi.x_vel, dtype=dtype)
    s = torch.as_tensor(midi.s, dtype=dtype)
    s_frames = s[:, None, :].expand(-1, x_pitch.shape[1], -1)
    return torch.cat([x_pitch, x_vel, s_frames], dim=-1)


def control_input_tensor(f0, l, p, c, dtype=torch.float64):
    """Control contours (S, T) each -> (S, T, 4 + S) decoder input."""
    feats = torch.stack(
        [torch.as_tensor(v, dtype=dtype) for v in (f0, l, p, c)], dim=-1
    )
    s = torch.eye(feats.shape[0], dtype=dtype)
    s_frames = s[:, None, :].expand(-1, feats.shape[1], -1)
    return torch.cat([feats, s_frames], dim=-1)


class ControlModelRG(nn.Module):
    """Regression control model: four sigmoid contour heads."""

    KIND = "control_rg"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        in_dim = config.n_pitch_bins + config.n_vel_bins + N_STRINGS
        self.backbone = _Backbone(in_dim, config, with_attention=True)
        self.heads = nn.ModuleDict(
            {k: nn.Linear(config.hidden_size, 1) for k in ("f0", "l", "p", "c")}
        )
        _init_parameters(self, config.seed, config.hidden_size)
        self.to(config.torch_dtype)

    def forward(self, x):
        x, squeeze = _ensure_batch(x)
        h = self.backbone(x)
        out = {k: torch.sigmoid(head(h)).squeeze(-1) for k, head in self.heads.items()}
        if squeeze:
            out = {k: v.squeeze(0) for k, v in out.items()}
        return out


class ControlModelCL(nn.Module):
    """Classification control model: softmax bin probabilities per feature."""

    KIND = "control_cl"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        in_dim = config.n_pitch_bins + config.n_vel_bins + N_STRINGS
        self.backbone = _Backbone(in_dim, config, with_attention=True)
        self.heads = nn.ModuleDict({
            "F0": nn.Linear(config.hidden_size, config.n_pitch_bins),
            "L": nn.Linear(config.hidden_size, config.k_bins),
            "P": nn.Linear(config.hidden_size, config.k_bins),
            "C": nn.Linear(config.hidden_size, config.k_bins),
        })
        _init_parameters(self, config.seed, config.hidden_size)
        self.to(config.torch_dtype)

    def forward(self, x):
        x, squeeze = _ensure_batch(x)
        h = self.backbone(x)
        out = {k: torch.softmax(head(h), dim=-1) for k, head in self.heads.items()}
        if squeeze:
            out = {k: v.squeeze(0) for k, v in out.items()}
        return out


class ControlModelJT(nn.Module):
    """Joint-training control model: softmax F0 head, sigmoid l/p/c heads."""

    KIND = "control_jt"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        in_dim = config.n_pitch_bins + config.n_vel_bins + N_STRINGS
        self.backbone = _Backbone(in_dim, config, with_attention=True)
        self.f0_head = nn.Linear(config.hidden_size, config.n_pitch_bins)
        self.scalar_heads = nn.ModuleDict(
            {k: nn.Linear(config.hidden_size, 1) for k in ("l", "p", "c")}
        )
        _init_parameters(self, config.seed, config.hidden_size)
        self.to(config.torch_dtype)

    def forward(self, x):
        x, squeeze = _ensure_batch(x)
        h = self.backbone(x)
        f0_probs = torch.softmax(self.f0_head(h), dim=-1)
        scalars = {
            k: torch.sigmoid(head(h)).squeeze(-1) for k, head in self.scalar_heads.items()
        }
        if squeeze:
            f0_probs = f0_probs.squeeze(0)
            scalars = {k: v.squeeze(0) for k, v in scalars.items()}
        return f0_probs, scalars


class SynthesisDecoder(nn.Module):
    """Control features -> synthesis parameters, strings independent."""

    KIND = "decoder"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = _Backbone(4 + N_STRINGS, config, with_attention=False)
        self.head_H = nn.Linear(config.hidden_size, config.n_harmonics)
        self.head_a = nn.Linear(config.hidden_size, 1)
        self.head_N = nn.Linear(config.hidden_size, config.n_noise_bands)
        _init_parameters(self, config.seed, config.hidden_size)
        self.to(config.torch_dtype)

    def forward(self, x) -> SynthesisParams:
        x, squeeze = _ensure_batch(x)
        h = self.backbone(x)
        H = exp_sigmoid(self.head_H(h))
        amp = exp_sigmoid(self.head_a(h)).squeeze(-1)
        N = exp_sigmoid(self.head_N(h))
        if squeeze:
            H, amp, N = H.squeeze(0), amp.squeeze(0), N.squeeze(0)
            return SynthesisParams(H=H, a=amp, N=N)
        return [SynthesisParams(H=H[b], a=amp[b], N=N[b]) for b in range(H.shape[0])]


class UnifiedModel(nn.Module):
    """MIDI input -> F0 bin probabilities plus synthesis parameters."""

    KIND = "unified"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        in_dim = config.n_pitch_bins + config.n_vel_bins + N_STRINGS
        self.backbone = _Backbone(in_dim, config, with_attention=True)
        self.f0_head = nn.Linear(config.hidden_size, config.n_pitch_bins)
        self.head_H = nn.Linear(config.hidden_size, config.n_harmonics)
        self.head_a = nn.Linear(config.hidden_size, 1)
        self.head_N = nn.Linear(config.hidden_size, config.n_noise_bands)
        _init_parameters(self, config.seed, config.hidden_size)
        self.to(config.torch_dtype)

    def forward(self, x):
        x, squeeze = _ensure_batch(x)
        h = self.backbone(x)
        f0_probs = torch.softmax(self.f0_head(h), dim=-1)
        H = exp_sigmoid(self.head_H(h))
        amp = exp_sigmoid(self.head_a(h)).squeeze(-1)
        N = exp_sigmoid(self.head_N(h))
        if squeeze:
            return f0_probs.squeeze(0), SynthesisParams(
                H=H.squeeze(0), a=amp.squeeze(0), N=N.squeeze(0)
            )
        return f0_probs, [
            SynthesisParams(H=H[b], a=amp[b], N=N[b]) for b in range(H.shape[0])
        ]


MODEL_CLASSES = {
    cls.KIND: cls
    for cls in (ControlModelRG, ControlModelCL, ControlModelJT, SynthesisDecoder, UnifiedModel)
}


def build_model(kind, config: ModelConfig):
    if kind not in MODEL_CLASSES:
        raise ValueError(f"unknown model kind: {kind!r}")
    return MODEL_CLASSES[kind](config)


def argmax_decode(probs, n_bins=None):
    """Argmax over the bin axis, dequantized to bin centers.

    Ties break toward the lower bin index. The result carries no gradient
    (argmax is a gradient barrier).
    """
    n_bins = probs.shape[-1] if n_bins is None else n_bins
    bins = probs.detach().argmax(dim=-1)
    return (bins.to(probs.dtype) + 0.5) / n_bins


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


# --- checkpoint container ----------------------------------------------------


@dataclass
class Checkpoint:
    """Single-file training state: config + named parameter tensors."""

    config: ModelConfig
    parameters: dict  # module key -> {param name -> np.ndarray}
    training_step: int = 0
    validation_loss: float = float("inf")
    extra: dict = field(default_factory=dict)

    def build_module(self, key):
        """Reconstruct a module (model kind or 'reverb') from stored tensors."""
        if key == "reverb":
            module = ReverbBank(
                length=REVERB_LENGTH, seed=self.config.seed, dtype=self.config.torch_dtype
            )
        else:
            module = build_model(key, self.config)
        state = {
            name: torch.as_tensor(arr, dtype=self.config.torch_dtype)
            for name, arr in self.parameters[key].items()
        }
        module.load_state_dict(state)
        return module


def save_checkpoint(path, config: ModelConfig, modules: dict, training_step=0,
                    validation_loss=float("inf"), extra=None):
    """Write config + per-module parameter tensors to one .npz file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "modules": list(modules),
        "training_step": int(training_step),
        "validation_loss": float(validation_loss),
        "extra": extra or {},
    }
    arrays = {}
    for key, module in modules.items():
        for name, tensor in module.state_dict().items():
            arrays[f"{key}::{name}"] = tensor.detach().cpu().numpy()
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta['version']}")
        parameters = {key: {} for key in meta["modules"]}
        for full_name in data.files:
            if full_name == "__meta__":
                continue
            key, name = full_name.split("::", 1)
            parameters[key][name] = data[full_name]
    return Checkpoint(
        config=ModelConfig(**meta["config"]),
        parameters=parameters,
        training_step=meta["training_step"],
        validation_loss=meta["validation_loss"],
        extra=meta.get("extra", {}),
    )
