"""
Slice attention on a single volume
==================================

A volume is cut into N centre slices along one plane. A shared 2D backbone
turns each slice into a feature vector, a one-unit linear layer scores the
slices, a softmax turns the scores into weights that sum to one, and the
weighted sum of features goes to a two-class head.

This walk-through builds an untrained network, pushes one synthetic volume
through it piece by piece and checks the pieces against the one-call forward.
"""

import numpy as np
import torch

from slicexai.model import (
    SliceAttentionNet,
    adapt_first_conv,
    attention,
    collapse_input_channels,
    diagnose,
    encode_slices,
    forward,
    fuse,
)
from slicexai.phantom import PhantomSpec, generate_phantom_dataset
from slicexai.volume import extract_slices, prepare_sequence

torch.manual_seed(0)

# %%
# One phantom volume: a radial gradient plus noise, with a darker sphere for
# positive subjects.
spec = PhantomSpec(n_subjects=4, noise_sigma=0.5, lesion_delta=1.0, seed=1)
ds = generate_phantom_dataset(spec)
volume, label = ds.samples[0]
print("volume", volume.subject_id, volume.shape, "label", label)

# %%
# Sixteen axial slices around the centre, resampled to 16x16 and standardised.
seq = extract_slices(volume, "axial", 16)
print("axial slices", seq.indices.start, "to", seq.indices.stop - 1)
slices = prepare_sequence(seq, 16)

# %%
# The network. The attention scorer starts at zero, so an untrained model
# weighs every slice equally.
net = SliceAttentionNet(widths=(8, 16, 32), n_slices=16, slice_size=16).double()
print("parameters: backbone", net.count_parameters(net.backbone),
      "attention", net.count_parameters(net.attention),
      "(f_dim + 1 =", net.f_dim + 1, ") head", net.count_parameters(net.head))

# Give the scorer random weights so the softmax has something to do.
with torch.no_grad():
    net.attention.fc.weight.normal_(0, 0.3)

# %%
# Step by step: features, weights, fusion, class probabilities.
features = encode_slices(net.backbone, slices)      # (16, f_dim)
alphas = attention(net.attention, features, "axial", seq.start_index)
fused = fuse(features, alphas)
probs = diagnose(net.head, fused)
print("alpha sums to", alphas.alphas.sum(),
      "; most attended slice", alphas.start_index + int(alphas.alphas.argmax()))
print("probabilities", probs)

# %%
# The single-call forward gives the same answer.
probs_direct, alphas_direct = forward(net, volume, "axial", 16)
print("max difference, probabilities:", np.abs(probs - probs_direct).max())
print("max difference, weights:      ", np.abs(alphas.alphas - alphas_direct.alphas).max())

# %%
# Reusing an RGB-pretrained first layer on single-channel slices: summing the
# filters over the three input channels gives exactly the response to a
# three-times replicated grey image.
rgb = torch.nn.Conv2d(3, 8, 3, padding=1).double()
grey = adapt_first_conv(rgb)
img = torch.randn(1, 1, 16, 16, dtype=torch.float64)
with torch.no_grad():
    gap = (grey(img) - rgb(img.repeat(1, 3, 1, 1))).abs().max().item()
print("collapsed filter shape", tuple(collapse_input_channels(rgb.weight).shape),
      "max error", gap)
