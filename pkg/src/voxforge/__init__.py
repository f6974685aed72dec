"""voxforge: volumetric reconstruction from sparse depth scans, grasp-strategy
retrieval by shape similarity, and policy-gradient grasp refinement."""

from .voxel import (
    FrameMismatchError,
    MetricReport,
    PointCloud,
    UndefinedMetricError,
    VoxelGrid,
    accuracy,
    devoxelize,
    hit_rate,
    iou,
    load_ply,
    load_vxg1,
    metric_report,
    save_ply,
    save_vxg1,
    voxelize,
)
from .scan import (
    Camera,
    DepthImage,
    TriangleMesh,
    backproject,
    hemisphere_views,
    load_dpt1,
    load_mesh,
    load_obj,
    load_stl,
    mesh_to_solid_grid,
    render_depth,
    save_dpt1,
    save_obj,
)

__all__ = [
    "FrameMismatchError",
    "MetricReport",
    "PointCloud",
    "UndefinedMetricError",
    "VoxelGrid",
    "accuracy",
    "devoxelize",
    "hit_rate",
    "iou",
    "load_ply",
    "load_vxg1",
    "metric_report",
    "save_ply",
    "save_vxg1",
    "voxelize",
    "Camera",
    "DepthImage",
    "TriangleMesh",
    "backproject",
    "hemisphere_views",
    "load_dpt1",
    "load_mesh",
    "load_obj",
    "load_stl",
    "mesh_to_solid_grid",
    "render_depth",
    "save_dpt1",
    "save_obj",
]

__version__ = "0.1.0"
