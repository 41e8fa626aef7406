"""Slice-sequence classifier with soft-attention fusion.

A shared 2D backbone turns every slice into a feature vector, a single
linear scorer followed by a softmax turns those vectors into a
distribution over slices, and the attention-weighted feature sum feeds a
two-way linear head::

    f_i   = globalmax(conv(...(x_i)))
    w_i   = <a, f_i> + b
    alpha = softmax(w)
    F     = sum_i alpha_i f_i
    p     = softmax(head(F))

The network exposes ``alpha`` alongside the class probabilities; those
weights are what the XAI maps are built from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    EmptySequence,
    GradientUnavailable,
    IoFailure,
    LengthMismatch,
    ShapeMismatch,
    WrongChannelCount,
)
from .volume import Plane, SliceSequence, Volume3D, extract_slices, prepare_sequence

FUSIONS = ("attention", "mean", "slice")


def softmax(w, axis: int = -1) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    z = np.exp(w - w.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def stable_softmax(w: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = torch.exp(w - w.max(dim=dim, keepdim=True).values)
    return z / z.sum(dim=dim, keepdim=True)


@dataclass(frozen=True)
class AttentionWeights:
    """Slice-importance distribution for one plane.

    ``start_index`` is the volume index of the first weighted slice, so the
    weights can be placed back onto the full grid.
    """

    alphas: np.ndarray
    plane: Plane = Plane.AXIAL
    start_index: int = 0

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if a.size == 0:
            raise EmptySequence("attention weights must be non-empty")
        if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-6:
            raise ValueError(f"attention weights must be a distribution (sum={a.sum()!r})")
        a.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "plane", Plane.coerce(self.plane))

    def __len__(self) -> int:
        return self.alphas.size


# -- channel collapse ---------------------------------------------------------

def collapse_input_channels(filters):
    """Sum first-layer filters over their three input channels.

    ``filters`` has shape ``(out, 3, kh, kw)`` (numpy or torch); the result has
    shape ``(out, 1, kh, kw)``. Convolving a one-channel image with the result
    equals convolving the image replicated three times with the originals.
    """
    if filters.ndim != 4 or filters.shape[1] != 3:
        raise WrongChannelCount(
            f"expected filters of shape (out, 3, kh, kw), got {tuple(filters.shape)}"
        )
    if isinstance(filters, torch.Tensor):
        return filters.sum(dim=1, keepdim=True)
    return np.asarray(filters).sum(axis=1, keepdims=True)


def adapt_first_conv(conv: nn.Conv2d) -> nn.Conv2d:
    """Return a one-channel copy of an RGB-pretrained first convolution."""
    if conv.in_channels != 3:
        raise WrongChannelCount(f"first layer expects {conv.in_channels} channels, not 3")
    new = nn.Conv2d(1, conv.out_channels, conv.kernel_size, conv.stride, conv.padding,
                    conv.dilation, conv.groups, conv.bias is not None, conv.padding_mode,
                    device=conv.weight.device, dtype=conv.weight.dtype)
    with torch.no_grad():
        new.weight.copy_(collapse_input_channels(conv.weight))
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


# -- modules -------------------------------------------------------------------

class ToyBackbone(nn.Module):
    """Blocks of (conv, ReLU, 2x2 max-pool) followed by a global max-pool.

    Any replacement backbone must expose ``f_dim``, ``parameterized_layers()``
    and ``feature_maps()`` (last conv activations, used by GradCAM), and expects
    standardized one-channel slices.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32), kernel_size: int = 3):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        chans = (1,) + widths
        self.widths = widths
        self.kernel_size = kernel_size
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size, padding=kernel_size // 2)
            for cin, cout in zip(chans[:-1], chans[1:])
        )

    @property
    def f_dim(self) -> int:
        return self.widths[-1]

    def parameterized_layers(self) -> List[nn.Module]:
        return list(self.convs)

    def freeze(self, fraction: float) -> int:
        """Freeze the first ``ceil(fraction * L)`` parameterized layers."""
        layers = self.parameterized_layers()
        k = min(len(layers), math.ceil(round(fraction * len(layers), 9)))
        for i, layer in enumerate(layers):
            for p in layer.parameters():
                p.requires_grad_(i >= k)
        return k

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i < last:
                x = F.max_pool2d(x, 2)
        return x

    def pool(self, maps: torch.Tensor) -> torch.Tensor:
        if min(maps.shape[-2:]) >= 2:
            maps = F.max_pool2d(maps, 2)
        return maps.amax(dim=(-2, -1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"backbone expects (B, 1, H, W), got {tuple(x.shape)}")
        return self.pool(self.feature_maps(x))


class AttentionFusion(nn.Module):
    """Linear slice scorer; exactly ``f_dim + 1`` parameters."""

    def __init__(self, f_dim: int):
        super().__init__()
        self.fc = nn.Linear(f_dim, 1)

    def scores(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats).squeeze(-1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-2] == 0:
            raise EmptySequence("cannot attend over an empty slice sequence")
        return stable_softmax(self.scores(feats), dim=-1)


class DiagnosisHead(nn.Module):
    def __init__(self, f_dim: int, n_classes: int = 2):
        super().__init__()
        self.fc = nn.Linear(f_dim, n_classes)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats)


class SliceAttentionNet(nn.Module):
    """Backbone + fusion + head for one slicing plane.

    ``fusion`` selects how slice features are combined:

    * ``"attention"`` -- learned softmax weights (the main model);
    * ``"mean"`` -- uniform weights, i.e. feature averaging;
    * ``"slice"`` -- no fusion; the head classifies each slice on its own and
      the network is trained with slice-level labels (majority-vote baseline).
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32), n_slices: int = 16,
                 slice_size: int = 32, plane: Union[Plane, str] = Plane.AXIAL,
                 fusion: str = "attention", kernel_size: int = 3):
        super().__init__()
        if fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        self.backbone = ToyBackbone(widths, kernel_size)
        self.attention = AttentionFusion(self.backbone.f_dim)
        self.head = DiagnosisHead(self.backbone.f_dim)
        self.n_slices = int(n_slices)
        self.slice_size = int(slice_size)
        self.plane = Plane.coerce(plane)
        self.fusion = fusion
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Zero attention scorer, so training starts from uniform slice weights."""
        nn.init.zeros_(self.attention.fc.weight)
        nn.init.zeros_(self.attention.fc.bias)

    @property
    def f_dim(self) -> int:
        return self.backbone.f_dim

    def hparams(self) -> dict:
        return {
            "widths": list(self.backbone.widths),
            "kernel_size": self.backbone.kernel_size,
            "n_slices": self.n_slices,
            "slice_size": self.slice_size,
            "plane": self.plane.value,
            "fusion": self.fusion,
            "f_dim": self.f_dim,
        }

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, N, H, W)`` slices -> ``(B, N, f_dim)`` features."""
        b, n, h, w = x.shape
        return self.backbone(x.reshape(b * n, 1, h, w)).reshape(b, n, -1)

    def weights(self, feats: torch.Tensor) -> torch.Tensor:
        if self.fusion == "attention":
            return self.attention(feats)
        n = feats.shape[-2]
        if n == 0:
            raise EmptySequence("cannot fuse an empty slice sequence")
        return feats.new_full(feats.shape[:-1], 1.0 / n)

    def fuse_and_classify(self, feats: torch.Tensor):
        alphas = self.weights(feats)
        fused = (alphas.unsqueeze(-1) * feats).sum(dim=-2)
        return self.head(fused), alphas

    def forward(self, x: torch.Tensor):
        """Returns ``(logits (B, 2), alphas (B, N))``."""
        return self.fuse_and_classify(self.encode(x))

    def slice_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode(x))

    def count_parameters(self, module: Optional[nn.Module] = None) -> int:
        module = self if module is None else module
        return sum(p.numel() for p in module.parameters())


def build_model(hparams: dict) -> SliceAttentionNet:
    return SliceAttentionNet(
        widths=hparams.get("widths", (8, 16, 32)),
        n_slices=hparams.get("n_slices", 16),
        slice_size=hparams.get("slice_size", 32),
        plane=hparams.get("plane", "axial"),
        fusion=hparams.get("fusion", "attention"),
        kernel_size=hparams.get("kernel_size", 3),
    )


# -- array-level operations -------------------------------------------------------

def _as_tensor(a, ref: nn.Module) -> torch.Tensor:
    p = next(ref.parameters())
    return torch.as_tensor(np.asarray(a), dtype=p.dtype, device=p.device)


@torch.no_grad()
def encode_slices(backbone: ToyBackbone, seq: Union[SliceSequence, np.ndarray]) -> np.ndarray:
    """Encode prepared slices ``(N, H, W)`` into features ``(N, f_dim)``."""
    slices = seq.slices if isinstance(seq, SliceSequence) else np.asarray(seq)
    if slices.ndim != 3:
        raise ShapeMismatch(f"expected (N, H, W) slices, got shape {slices.shape}")
    x = _as_tensor(slices, backbone).unsqueeze(1)
    return backbone(x).cpu().double().numpy()


@torch.no_grad()
def attention(fusion: AttentionFusion, features, plane: Union[Plane, str] = Plane.AXIAL,
              start_index: int = 0) -> AttentionWeights:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EmptySequence("attention needs a non-empty (N, f_dim) feature array")
    w = feats @ fusion.fc.weight.detach().cpu().double().numpy()[0] \
        + float(fusion.fc.bias.detach().cpu())
    return AttentionWeights(softmax(w), plane, start_index)


def fuse(features, alphas) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    a = np.asarray(getattr(alphas, "alphas", alphas), dtype=np.float64)
    if feats.shape[0] != a.size:
        raise LengthMismatch(f"{feats.shape[0]} feature vectors but {a.size} weights")
    return a @ feats


@torch.no_grad()
def diagnose(head: DiagnosisHead, fused) -> np.ndarray:
    fused = np.asarray(fused, dtype=np.float64)
    logits = fused @ head.fc.weight.detach().cpu().double().numpy().T \
        + head.fc.bias.detach().cpu().double().numpy()
    return softmax(logits)


def prepare_volume(v: Volume3D, plane: Union[Plane, str], n: int, size: int):
    """Slice and prepare one volume; returns ``(array (n, size, size), start_index)``."""
    seq = extract_slices(v, plane, n)
    return prepare_sequence(seq, size), seq.start_index


@torch.no_grad()
def forward(model: SliceAttentionNet, v: Union[Volume3D, Sequence[Volume3D]],
            plane: Optional[Union[Plane, str]] = None, n: Optional[int] = None):
    """Classify one volume (or a list of volumes) and return the attention weights.

    For a single volume returns ``(probs (2,), AttentionWeights)``; for a list,
    ``(probs (B, 2), [AttentionWeights, ...])``.
    """
    plane = Plane.coerce(plane) if plane is not None else model.plane
    n = model.n_slices if n is None else n
    single = isinstance(v, Volume3D)
    vols = [v] if single else list(v)
    prepared = [prepare_volume(vol, plane, n, model.slice_size) for vol in vols]
    x = _as_tensor(np.stack([p for p, _ in prepared]), model)
    logits, alphas = model(x)
    probs = softmax(logits.cpu().double().numpy())
    # renormalize in float64; the network may run in float32
    weights = [AttentionWeights(a / a.sum(), plane, start)
               for a, (_, start) in zip(alphas.cpu().double().numpy(), prepared)]
    if single:
        return probs[0], weights[0]
    return probs, weights


# -- GradCAM -----------------------------------------------------------------------

def gradcam_sequence(model: SliceAttentionNet, slices, target_class: int = 1) -> np.ndarray:
    """GradCAM maps for every slice of a prepared ``(N, H, W)`` sequence.

    Uses the pre-softmax score of ``target_class`` and the activations of the
    backbone's last convolution; maps are rectified and bilinearly upsampled
    to the slice size.
    """
    if not hasattr(model.backbone, "feature_maps"):
        raise GradientUnavailable("backbone does not expose feature_maps()")
    slices = slices.slices if isinstance(slices, SliceSequence) else np.asarray(slices)
    n, h, w = slices.shape
    x = _as_tensor(slices, model).unsqueeze(1)
    with torch.no_grad():
        maps = model.backbone.feature_maps(x)
    maps = maps.detach().requires_grad_(True)
    with torch.enable_grad():
        feats = model.backbone.pool(maps).unsqueeze(0)
        if model.fusion == "slice":
            score = model.head(feats)[0, :, target_class].sum()
        else:
            logits, _ = model.fuse_and_classify(feats)
            score = logits[0, target_class]
        (grad,) = torch.autograd.grad(score, maps, allow_unused=True)
    if grad is None:
        raise GradientUnavailable("class score does not depend on the feature maps")
    channel_weights = grad.mean(dim=(-2, -1), keepdim=True)
    cam = F.relu((channel_weights * maps.detach()).sum(dim=1, keepdim=True))
    if cam.shape[-2:] != (h, w):
        cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    return cam[:, 0].cpu().double().numpy()


def gradcam_slice(model: SliceAttentionNet, slice_index: int, slices,
                  target_class: int = 1) -> np.ndarray:
    return gradcam_sequence(model, slices, target_class)[slice_index]


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(model: SliceAttentionNet, path, provenance: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format": "slicexai-checkpoint/1",
        "hparams": model.hparams(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "provenance": dict(provenance or {}),
        "extra": dict(extra or {}),
    }
    try:
        torch.save(payload, str(path))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Tuple[SliceAttentionNet, dict]:
    """Load a checkpoint; returns ``(model, payload)``."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such checkpoint: {path}")
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    model = build_model(payload["hparams"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
