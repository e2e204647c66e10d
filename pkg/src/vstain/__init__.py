"""Virtual staining of defocused autofluorescence with a refocusing front end.

A small numpy autodiff engine drives two U-Net GANs: a virtual stainer that
maps two-channel autofluorescence to H&E-like YCbCr images, and a refocuser
trained against the frozen stainer.  Synthetic tissue phantoms, image
registration, quality metrics and a whole-slide scan-time model round out
the package.
"""

from .checkpoint import Checkpoint, CheckpointError
from .config import TrainConfig, desk_profile, load_config, paper_profile
from .inference import evaluate_color_vs_defocus, infer, stain_ycbcr, tiled_stain_ycbcr
from .losses import DrLossWeights, MsssimParams, VsLossWeights
from .metrics import (
    ColorDifferenceRecord,
    TTestResult,
    chroma_histograms,
    color_difference,
    msssim,
    paired_upper_t_test,
    psnr,
    rgb_to_ycbcr,
    ssim,
    ycbcr_to_rgb,
)
from .models import build_discriminator, build_dr_generator, build_vs_generator
from .phantom import generate_phantom, make_record, render_autofluorescence, render_hne, synthesize_dataset
from .registration import (
    AffineTransform,
    DisplacementField,
    affine_register,
    coarse_match,
    elastic_register,
    register_pipeline,
    warp_image,
)
from .scan import FocusSearchProfile, ScanPlan, autofocus_point_time, compare_plans, plan_scan
from .tensor import Tensor, backward, no_grad
from .training import train_refocuser, train_virtual_stainer

__version__ = "0.1.0"
