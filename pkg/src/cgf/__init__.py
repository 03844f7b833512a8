"""Learned compact descriptors for 3D point-cloud matching."""

from .errors import CGFError
from .geometry import PointCloud, RigidTransform, load_cloud, save_cloud
from .histogram import HistogramBatch, HistogramConfig, featurize_cloud
from .lrf import LrfConfig, estimate_frames
from .net import EmbeddingNet, NetConfig, init_net, load_model, save_model, train

__version__ = "0.1.0"
