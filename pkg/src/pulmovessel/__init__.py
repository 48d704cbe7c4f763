"""Pulmonary artery/vein segmentation toolkit built around centerline structure."""
from .errors import VesselError, ValidationError
from .io import read_labels, read_volume, write_volume
from .metrics import cl_dice, cl_recall, dice, evaluate, recall
from .postprocess import RepairConfig, connected_components, repair, repair_idempotence_check
from .preprocess import PreprocessConfig, crop_to_lung_bbox, percentile_clip, preprocess_case, resample_nearest, resample_trilinear
from .skeleton import class_skeletons, simple_point_test, skeleton_of_class, skeletonize
from .synthgen import Branch, PhantomSpec, default_spec, generate_tree, perturb_labels, rasterize_tube
from .vlsom import WeightConfig, WeightKind, build_weight_map, composite_loss, soft_skeleton
from .volume import LabelVolume, ProbVolume, ScalarVolume, VolumeGeometry, voxel_count

__version__ = "0.1.0"
