"""Online panoptic 3D reconstruction with LAP-based instance association."""

from .association import AssociationConfig, AssociationResult, associate
from .dataset import LabelMap, PanopticFrame, load_sequence
from .evaluation import LabeledVolume, PqStats, evaluate_volumes, match_segments, panoptic_quality
from .fusion import FusionConfig, integrate_frame, update_voxel_label, update_voxel_tsdf
from .geometry import Intrinsics, Pose
from .lap import augment, solve
from .pipeline import Reconstructor, RunConfig
from .synthetic import SceneSpec, generate_synthetic, parse_scene
from .voxel_map import InstanceRegistry, VoxelBlockGrid, VoxelState

__version__ = "0.1.0"
