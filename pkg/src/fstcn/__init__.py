"""Factorized spatio-temporal convolutional networks for action recognition.

Subpackages and modules:

* :mod:`fstcn.tensor` - numpy tensors with a reverse-mode gradient tape
* :mod:`fstcn.factorized` - 3D kernels as spatial x temporal Kronecker products
* :mod:`fstcn.clips` - clip-pair sampling, frame differencing, test crops
* :mod:`fstcn.network` - the two-path network, checkpoints, saliency
* :mod:`fstcn.trainer` - momentum SGD and the training loop
* :mod:`fstcn.fusion` - sparsity-weighted and averaged score fusion
* :mod:`fstcn.synthetic` / :mod:`fstcn.video_io` - toy dataset and file formats
"""

from .clips import ClipPair, ClipSpec, CropSet, VideoSequence, frame_diff, sample_clip_pair
from .factorized import FactorizedKernel, conv3d, conv_factorized, kron_expand, param_savings
from .fusion import fuse_average, fuse_clips, fuse_crops, infer_sequence, sci
from .network import Network, NetworkConfig, desk_config, full_config, param_shapes
from .trainer import SGD, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ClipPair", "ClipSpec", "CropSet", "VideoSequence", "frame_diff", "sample_clip_pair",
    "FactorizedKernel", "conv3d", "conv_factorized", "kron_expand", "param_savings",
    "fuse_average", "fuse_clips", "fuse_crops", "infer_sequence", "sci",
    "Network", "NetworkConfig", "desk_config", "full_config", "param_shapes",
    "SGD", "TrainConfig", "train",
]
