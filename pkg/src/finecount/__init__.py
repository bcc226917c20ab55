"""Category-aware crowd counting toolkit.

Estimates an overall crowd density map and a soft category segmentation
from dot-annotated images, refines both with density-guided context
propagation and cross-branch attention, and multiplies them into
per-category density maps whose spatial sums are per-category counts.
"""

from .annotations import (DatasetManifest, DotAnnotation, ManifestError,
                          Sample, StatsReport, average_image, dataset_stats,
                          load_manifest, save_manifest,
                          spatial_probability_maps)
from .groundtruth import (DEFAULT_EPSILON, DEFAULT_ETA, KernelSpec,
                          downsample_density, downsample_segmentation,
                          make_segmentation_maps, render_category_densities,
                          render_density_map, targets_from_densities)
from .losses import (LossBreakdown, compute_losses, counting_loss,
                     fine_grained_loss, segmentation_loss, total_loss)
from .metrics import (EvalReport, build_report, cmae, mae_per_category, omae,
                      segmentation_metrics)
from .network import (ArchConfig, ForwardOutputs, OneNet, SegmentNet,
                      TwoBranchNet, TwoNets, build_model, dampening_matrix,
                      mix_fine_grained, naive_attention, parameter_count)
from .synthgen import (SceneRanges, SceneSpec, generate_manifest,
                       generate_scene)
from .training import (Checkpoint, NonFiniteLossError, TrainConfig,
                       build_baseline, evaluate, train)

__version__ = "0.1.0"
