"""Silver-standard consensus brain masks: STAPLE fusion, post-processing and evaluation."""

__version__ = "0.1.0"

from .volgrid import Volume, ValueKind, binary_mask, probability_volume, intensity_volume, read_nifti, write_nifti
from .staple import StapleConfig, StapleResult, RaterPerformance, staple_fuse, binarize, majority_vote
from .metrics import EvalRecord, confusion_counts, dice, sensitivity, specificity, hausdorff, mean_surface_distance, evaluate
from .morphology import label_components, largest_component, build_maxtree, area_open
from .preprocess import PatchSpec, normalize_intensity, sample_patches, fuse_triplanar, threshold_prob, stack_autocontext
from .stats import wilcoxon_signed_rank, bonferroni, aggregate_report
