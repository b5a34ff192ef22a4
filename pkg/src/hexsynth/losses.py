"""Training objectives: multi-scale spectral loss, feature regression and
classification losses, and the combined joint/unified objectives.

Regression terms (squared error, summed over strings and frames):
    f0 term weighted by target l * p, p and c terms weighted by target l,
    l term unweighted.
Classification terms mirror these weights on negative log probabilities of
the target bins. Reductions are plain sums by default ("mean" averages over
strings * frames instead).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

MSSL_WINDOW_SIZES = (192, 384, 768, 1526, 3072, 6144, 12288)
LOG_EPS = 1e-7


@dataclass
class LossBreakdown:
    """Total loss with named components; total == sum(components)."""

    total: torch.Tensor
    components: dict = field(default_factory=dict)

    @classmethod
    def from_components(cls, components):
        total = sum(components.values())
        return cls(total=total, components=dict(components))

    def item(self):
        return float(self.total)

    def to_dict(self):
        return {
            "total": float(self.total),
            "components": {k: float(v) for k, v in self.components.items()},
        }


def _spectrogram(signal, window_size, window):
    return torch.stft(
        signal,
        n_fft=window_size,
        hop_length=window_size // 4,
        win_length=window_size,
        window=window,
        center=True,
        pad_mode="constant",
        return_complex=True,
    ).abs()


def mssl(y, y_hat, window_sizes=MSSL_WINDOW_SIZES, eps=LOG_EPS):
    """Multi-scale spectral loss: per window size, mean L1 between linear
    magnitude spectrograms plus mean L1 between log magnitudes."""
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    loss = None
    for size in window_sizes:
        window = torch.hann_window(size, dtype=y.dtype, device=y.device)
        s_ref = _spectrogram(y, size, window)
        s_hat = _spectrogram(y_hat, size, window)
        lin = (s_ref - s_hat).abs().mean()
        log = (torch.log(s_ref + eps) - torch.log(s_hat + eps)).abs().mean()
        loss = lin + log if loss is None else loss + lin + log
    return loss


def _reduce(term, reduction):
    if reduction == "sum":
        return term.sum()
    if reduction == "mean":
        return term.mean()
    raise ValueError(f"unknown reduction: {reduction}")


def loss_regression(pred, target, reduction="sum") -> LossBreakdown:
    """Squared-error feature losses with target-side loudness/periodicity weights.

    ``pred`` and ``target`` are dicts with keys f0, l, p, c, each (S, T).
    """
    for key in ("f0", "l", "p", "c"):
        if pred[key].shape != target[key].shape:
            raise ValueError(f"shape mismatch for '{key}'")
    w_l = target["l"]
    w_lp = target["l"] * target["p"]
    components = {
        "f0": _reduce((target["f0"] - pred["f0"]) ** 2 * w_lp, reduction),
        "l": _reduce((target["l"] - pred["l"]) ** 2, reduction),
        "p": _reduce((target["p"] - pred["p"]) ** 2 * w_l, reduction),
        "c": _reduce((target["c"] - pred["c"]) ** 2 * w_l, reduction),
    }
    return LossBreakdown.from_components(components)


def _nll(pred_probs, target_onehot, eps=LOG_EPS):
    """Negative log probability of the target bin, (S, T).

    The floor is a clamp (not an additive offset) so a probability of
    exactly 1 yields exactly zero loss.
    """
    p_target = (pred_probs * target_onehot).sum(dim=-1)
    return -torch.log(p_target.clamp(min=eps))


def loss_classification(pred_probs, target_onehot, target_l, target_p,
                        reduction="sum", normalization_tol=1e-4) -> LossBreakdown:
    """Weighted negative-log-probability losses over quantization bins.

    ``pred_probs``/``target_onehot`` are dicts with keys F0, L, P, C shaped
    (S, T, bins); probabilities must sum to 1 over bins. The F0 term is
    weighted by target l * p, P and C by target l, L is unweighted.
    """
    for key in ("F0", "L", "P", "C"):
        if pred_probs[key].shape != target_onehot[key].shape:
            raise ValueError(f"shape mismatch for '{key}'")
        sums = pred_probs[key].sum(dim=-1)
        if (sums - 1.0).abs().max() > normalization_tol:
            raise ValueError(f"'{key}' probabilities do not sum to 1 over bins")
    w_l = target_l
    w_lp = target_l * target_p
    components = {
        "F0": _reduce(_nll(pred_probs["F0"], target_onehot["F0"]) * w_lp, reduction),
        "L": _reduce(_nll(pred_probs["L"], target_onehot["L"]), reduction),
        "P": _reduce(_nll(pred_probs["P"], target_onehot["P"]) * w_l, reduction),
        "C": _reduce(_nll(pred_probs["C"], target_onehot["C"]) * w_l, reduction),
    }
    return LossBreakdown.from_components(components)


def classification_f0_term(pred_F0_probs, target_F0_onehot, target_l, target_p,
                           reduction="sum"):
    """The F0 classification component alone (used by joint/unified training)."""
    return _reduce(_nll(pred_F0_probs, target_F0_onehot) * (target_l * target_p), reduction)


def loss_joint(f0_component, y, y_hat, window_sizes=MSSL_WINDOW_SIZES) -> LossBreakdown:
    """F0 classification term plus spectral reconstruction; no direct
    supervision of loudness, periodicity or centroid."""
    return LossBreakdown.from_components(
        {"f0": f0_component, "mssl": mssl(y, y_hat, window_sizes)}
    )


def loss_unified(f0_component, y, y_hat, window_sizes=MSSL_WINDOW_SIZES) -> LossBreakdown:
    """Identical structure to :func:`loss_joint` for the single-network model."""
    return loss_joint(f0_component, y, y_hat, window_sizes)
