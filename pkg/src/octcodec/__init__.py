"""Learned octree occupancy codec for point cloud geometry.

A point cloud is voxelized, serialized as breadth-first octree occupancy codes
and entropy coded with a small attention model. Nodes of a layer are split into
context segments and each segment into groups that decode one after another,
so decoding needs a number of model calls that grows with the group count
rather than with the node count.
"""

from .codec import CodecMode, decode, encode
from .context import SegmentSpec
from .model import ModelConfig, init_model, load_model, save_model
from .pointcloud import PointCloud, load_ply, write_ply

__all__ = ["CodecMode", "ModelConfig", "PointCloud", "SegmentSpec", "decode", "encode", "init_model",
           "load_model", "load_ply", "save_model", "write_ply"]
__version__ = "0.1.0"
