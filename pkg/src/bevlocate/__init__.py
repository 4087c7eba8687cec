"""Cross-view BEV rendering and NCC registration for localizing a vehicle on aerial maps."""

from .geometry import (BevGridSpec, CameraModel, GeoTransform, Pose2, PoseDelta, bilinear_sample,
                       meters_to_px_ceil, pixel_to_utm, pose_delta, project_bev_points, utm_to_pixel,
                       warp_grid)
from .mapstore import GeoRaster, crop_rotated, label_for_pose, load_map, save_map, search_region
from .registration import MatchResult, localize, ncc_map, ncc_map_fast
from .evaluation import EvalReport, ape_series, summarize

__version__ = "0.1.0"
