"""Low-dose CT denoising: a channel-attention U-Net trained jointly with an
anatomical contrastive network, plus evaluation and interpretability tools."""

from .imaging import (
    Mask,
    NormalizedImage,
    PhantomSpec,
    Slice,
    TissueRegion,
    default_phantom_spec,
    foreground_mask,
    generate_phantom,
    hu_window_normalize,
    load_slice,
    normalized_to_hu,
    save_slice,
)
from .esau import ChannelAttention, EsauLevel, EsauNet, denoise_image
from .mac import MacEncoder, MacNet
from .losses import (
    NegativeSet,
    PositiveSet,
    cosine_similarity,
    global_loss,
    hard_negative_sample,
    local_contrastive_loss,
    local_infonce,
    neighbor_positive_match,
    patch_aggregate,
    pixel_loss,
    total_loss,
)
from .metrics import MetricReport, cnr, evaluate, psnr, rmse, ssim
from .trainer import (
    AdamW,
    TrainConfig,
    TrainState,
    adamw_step,
    load_checkpoint,
    load_denoiser,
    lr_schedule,
    new_train_state,
    save_checkpoint,
    train,
    train_step,
)
from .interpret import LabelMap, extract_features, kmeans_cluster, render_label_map

__version__ = "0.1.0"
