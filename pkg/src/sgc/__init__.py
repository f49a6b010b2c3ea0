"""SGC: voxelised geometric-centroid local shape descriptors, descriptor-graphs and scan registration."""

from .descriptor import (SgcDescriptor, SgcParams, compress, compute_descriptor, decompress, describe,
                         descriptor_similarity, read_descriptors, voxel_similarity, write_descriptors)
from .lrf import LocalReferenceFrame, Support, compute_lrf, extract_support
from .matching import MatchConfig, RigidTransform, icp_refine, reconstruct, register_pair
from .pointcloud import PointCloud, SpatialIndex, compute_resolution, load_cloud, save_cloud
from .saliency import DescriptorGraph, SaliencyParams, build_graph, graph_query

__version__ = "0.1.0"

__all__ = [
    "DescriptorGraph", "LocalReferenceFrame", "MatchConfig", "PointCloud", "RigidTransform", "SaliencyParams",
    "SgcDescriptor", "SgcParams", "SpatialIndex", "Support", "build_graph", "compress", "compute_descriptor",
    "compute_lrf", "compute_resolution", "decompress", "describe", "descriptor_similarity", "extract_support",
    "graph_query", "icp_refine", "load_cloud", "read_descriptors", "reconstruct", "register_pair", "save_cloud",
    "voxel_similarity", "write_descriptors",
]
