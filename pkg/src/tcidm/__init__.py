"""Tool-centric inverse dynamics: imagined-video by-products to executable TCP actions."""
from .depth import (CameraIntrinsics, DepthFrame, PoseSequence, ScaleShift, apply_scale_shift,
                    fit_scale_shift, metricize_poses)
from .geometry import RigidTransform, compose, kabsch_align, residual
from .heads import FeatureVector, Mlp, MlpSpec, TrainConfig, gradient_check, predict_sequence, train
from .poses import TcpAction, TrajectoryReport, recover_step, recover_trajectory, safety_check, \
    smooth_trajectory
from .tracks import FilterConfig, PointTrack, RigidityScore, ToolMask, lift_tracks, mask_tracks, \
    select_rigid

__version__ = "0.1.0"
