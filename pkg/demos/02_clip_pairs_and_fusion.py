# coding: utf-8

# # Clip pairs and score fusion
#
# Each training example is a pair: a short clip of frames and the matching
# clip of absolute frame differences. At test time many crops and clips are
# scored and the scores are fused into one prediction.

# In[1]:

import tempfile

import numpy as np

from fstcn.clips import ClipSpec, CropSet, frame_diff, sample_clip_pair
from fstcn.fusion import fuse, fuse_average, fuse_crops, predict, sci
from fstcn.synthetic import SyntheticConfig, generate_synthetic
from fstcn.video_io import load_dataset


# ## A synthetic dataset
#
# Four classes: two sprite shapes, each moving up or down over static
# clutter. A single frame shows the shape but not the direction.

# In[2]:

root = generate_synthetic(SyntheticConfig(sequences_per_class=4, seed=0), tempfile.mkdtemp())
ds = load_dataset(root)
print(ds.classes)
seq = ds.train[0]
print(seq.name, "label", seq.label, "shape", seq.shape)


# ## Sampling a pair
#
# Frames `start, start + s_t, ...` are taken from the sequence and from its
# difference video, with the same crop and the same optional horizontal flip.

# In[3]:

spec = ClipSpec(l_x=32, l_y=32, l_t=5, s_t=4, d_t=2)
pair = sample_clip_pair(seq, spec, seed=3)
print("frame indices", pair.record.indices)
print("crop origin", pair.record.crop_origin, "flipped", pair.record.flip)
print("clip", pair.clip.shape, "diff clip", pair.diff_clip.shape)

diff = frame_diff(seq, spec.d_t)
print("difference energy per frame", np.round(diff.frames.sum(axis=(0, 1, 3))[:6], 2))


# ## Test-time crops
#
# Nine positions times two flips give 18 crops per clip.

# In[4]:

for origin, flip in CropSet().origins(seq.shape[:2], spec)[:6]:
    print(origin, "flip" if flip else "")


# ## How peaked is a score vector?
#
# The sparsity concentration index is 1 for a one-hot vector and 0 for a
# uniform one.

# In[5]:

for p in ([1.0, 0.0, 0.0, 0.0], [0.5, 0.2, 0.2, 0.1], [0.25] * 4):
    print(p, round(float(sci(p)), 3))


# ## Why weighting helps
#
# One confident crop among many uncertain ones. Averaging dilutes its vote;
# weighting by the index keeps it.

# In[6]:

n_classes = 4
scores = np.full((18, n_classes), 1.0 / n_classes)
scores[0] = [0.05, 0.05, 0.85, 0.05]
scores[1:] += np.random.default_rng(0).normal(0, 0.02, (17, n_classes))
scores[1:] = np.abs(scores[1:]) / np.abs(scores[1:]).sum(axis=1, keepdims=True)

print("weighted", np.round(fuse_crops(scores), 3), "->", predict(fuse_crops(scores)))
print("average ", np.round(fuse_average(scores), 3), "->", predict(fuse_average(scores)))


# ## Clips
#
# Per-clip vectors are combined by an entrywise maximum, so one clip that
# sees the action clearly is enough.

# In[7]:

grid = np.stack([scores, np.roll(scores, 1, axis=1)])  # (clips, crops, classes)
print("sci fusion    ", np.round(fuse(grid, "sci"), 3))
print("average fusion", np.round(fuse(grid, "average"), 3))
