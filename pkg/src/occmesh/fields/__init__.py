from .sdf import SDFGrid, TopologyError, build_sdf, check_watertight, sample_sdf
from .primitives import box_mesh, icosphere
from .raster import DepthRender, hard_rasterize, pixel_centers, rasterize

__all__ = [
    "DepthRender", "SDFGrid", "TopologyError", "box_mesh", "build_sdf", "check_watertight",
    "hard_rasterize", "icosphere", "pixel_centers", "rasterize", "sample_sdf",
]
