"""ctxforest: semantic-context random forests for volumetric multi-class
segmentation, with distance-to-landmark features and multi-label
graph-cuts refinement."""

from . import _kernels
from .cascade import (CascadeConfig, CascadeModel, argmax_labels,
                      cartilage_probability_maps, infer_cascade,
                      infer_cascade_passes, load_cascade, save_cascade,
                      train_cascade)
from .distance import (LandmarkSet, bone_distance_maps, distance_to_landmark,
                       extract_band, load_landmarks, save_landmarks,
                       signed_distance_transform)
from .errors import CtxForestError, FileFormatError, ValidationError
from .eval import (EvalReport, FoldPlan, PipelineConfig, ablation,
                   cross_validate, dsc, make_folds)
from .features import (FeatureConfig, FeatureContext, FeatureDescriptor,
                       FeatureKind, evaluate_feature, sample_feature_pool)
from .forest import ForestConfig, RandomForest, load_forest, save_forest, train_forest
from .graphcut import (EnergyParams, FlowNetwork, alpha_expansion, data_term,
                       energy_of_labeling, max_flow, refine, smoothness_term)
from .phantom import PhantomSpec, generate_dataset, generate_phantom, load_manifest
from .volume import (LabelVolume, Volume, gradient_magnitude, load_label_volume,
                     load_volume, save_label_volume, save_volume, voxel_to_world,
                     world_to_voxel)

__version__ = "0.1.0"

BACKEND = _kernels.BACKEND
