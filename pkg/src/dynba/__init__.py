"""Dynamic bundle adjustment: camera poses, focal length, static and moving structure from monocular video cues."""

from .errors import *  # noqa: F401,F403
from .evaluation import ate, depth_metrics, evaluate_directories, focal_metrics, rpe
from .geometry import (CameraIntrinsics, CameraPose, Trajectory, project, relative_pose, so3_exp, so3_log,
                       umeyama_align, unproject)
from .pipeline import PipelineConfig, RunReport, load_config, run_masking, run_pipeline, run_stages
from .scene import SceneBundle, load_bundle, save_bundle
from .solver import Problem, SolverOptions, check_jacobian, solve
from .synthetic import SynthConfig, generate_scene

__version__ = "0.1.0"

__all__ = [
    "ate", "depth_metrics", "evaluate_directories", "focal_metrics", "rpe",
    "CameraIntrinsics", "CameraPose", "Trajectory", "project", "relative_pose", "so3_exp", "so3_log",
    "umeyama_align", "unproject",
    "PipelineConfig", "RunReport", "load_config", "run_masking", "run_pipeline", "run_stages",
    "SceneBundle", "load_bundle", "save_bundle",
    "Problem", "SolverOptions", "check_jacobian", "solve",
    "SynthConfig", "generate_scene",
]
