"""dbpnet: point cloud upsampling via dual back-projection refinement."""

from .autodiff import Tensor, backward, grad_check, mlp_forward, no_grad
from .geometry import (
    Plane,
    PointCloud,
    Sphere,
    Torus,
    TriangleMesh,
    farthest_point_sample,
    knn,
    normalize_patch,
    point_to_surface,
    random_subsample,
    resample_into_subsets,
)
from .losses import chamfer, total_loss, uniform_loss
from .metrics import MetricsReport, chamfer_distance, hausdorff, p2f_mean, uniformity
from .network import ModelParams, dbpnet_forward, init_model_params
from .pipeline import (
    Checkpoint,
    TrainConfig,
    evaluate,
    gen_surface_cloud,
    load_checkpoint,
    load_config,
    make_patch_pairs,
    save_checkpoint,
    train,
    upsample_cloud,
)

__version__ = "0.1.0"
