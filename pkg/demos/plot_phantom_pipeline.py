"""
From slice attention to a ranked list of regions
================================================

The full explanation pipeline on a small synthetic cohort:

1. generate phantom volumes whose positive class has a darker sphere (the
   "lesion") and whose atlas also marks a same-size sphere that carries no
   class signal (the "distractor");
2. train one attention model per plane on one cross-validation fold;
3. average each plane's attention over the test scans;
4. take the outer product of the three profiles to get a voxel map, keep the
   top 0.1 % of voxels, and rank atlas regions by how many of those voxels
   they hold.

A working pipeline ranks the lesion first. Settings are kept small so the
script finishes in about a minute; ``configs/phantom.yaml`` has the full-size
experiment for the command-line tool.
"""

import time

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from slicexai.evaluation import evaluate_subject_level, predict
from slicexai.model import AttentionWeights
from slicexai.phantom import PhantomSpec, generate_phantom_dataset
from slicexai.regions import rank_report, region_stats
from slicexai.train import TrainConfig, make_folds, prepare_samples, train_model
from slicexai.volume import Volume3D
from slicexai.xai import binarize, mean_attention, minmax_normalize, overlay, synthesize_map

torch.set_num_threads(1)
start = time.perf_counter()

# %%
# A cohort of 60 subjects, one scan each, lesion contrast equal to the noise.
spec = PhantomSpec(n_subjects=60, noise_sigma=1.0, lesion_delta=1.0, seed=0)
ds = generate_phantom_dataset(spec)
folds = make_folds(ds.labels_by_subject(), k=5, seed=0)
fold = folds[0]
print(f"{len(ds.samples)} scans; fold 0 trains on {len(fold.train_subjects)} subjects, "
      f"validates on {len(fold.val_subjects)}, tests on {len(fold.test_subjects)}")

# %%
# One model per plane. Each sees 16 centre slices resampled to 16x16.
profiles = {}
for plane in ("sagittal", "coronal", "axial"):
    data = prepare_samples(ds.samples, plane, n_slices=16, slice_size=16)
    config = TrainConfig(plane=plane, n_slices=16, slice_size=16, learning_rate=1e-3,
                         max_epochs=60, patience=10, seed=0)
    checkpoint, history = train_model(config, fold, data)
    test = data.subset(data.indices_for(fold.test_subjects))
    metrics = evaluate_subject_level(checkpoint.model, test.x, test.y)
    _, _, alphas = predict(checkpoint.model, test.x)
    profiles[plane] = mean_attention(
        [AttentionWeights(a / a.sum(), plane, s) for a, s in zip(alphas, test.starts)])
    peak = profiles[plane].start_index + int(profiles[plane].alphas.argmax())
    print(f"{plane:>8}: best epoch {history.best_epoch:3d}, test MCC {metrics.mcc:.2f}, "
          f"most attended slice {peak}")

# %%
# The voxel map, its binarisation and the region ranking.
amap = minmax_normalize(synthesize_map(profiles["sagittal"], profiles["coronal"],
                                       profiles["axial"], grid_shape=spec.volume_shape))
heatmap = binarize(amap, 99.9)
report = rank_report(region_stats(amap, heatmap, ds.atlas), top_n=20)
print(f"\nheatmap keeps {heatmap.count} voxels above {heatmap.threshold_value:.3f}")
print(report.to_text())

# %%
# Overlay on the cohort-mean volume: selected voxels are brightened by delta.
background = minmax_normalize(np.mean([v.data for v, _ in ds.samples], axis=0))
shown = overlay(Volume3D(background.data), heatmap, delta=1.0)
z = spec.lesion_center[2]
fig, axes = plt.subplots(1, 3, figsize=(9, 3))
axes[0].imshow(background.data[:, :, z].T, cmap="gray", origin="lower")
axes[0].set_title("mean volume")
axes[1].imshow(amap.data[:, :, z].T, cmap="magma", origin="lower")
axes[1].set_title("attention map")
axes[2].imshow(shown.data[:, :, z].T, cmap="gray", origin="lower")
axes[2].set_title("overlay")
for ax in axes:
    ax.set_axis_off()
fig.suptitle(f"axial slice {z}")
fig.tight_layout()
fig.savefig("phantom_pipeline.png", dpi=90)
print(f"figure written to phantom_pipeline.png ({time.perf_counter() - start:.0f}s)")
