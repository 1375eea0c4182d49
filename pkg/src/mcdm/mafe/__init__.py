from .model import MAFE, compose_middle, coordinate_grid, extract_motion_vector, local_attention, warp
from .pyramid import LossWeights, laplacian_loss, laplacian_pyramid, reconstruct, total_loss
from .train import MAFEConfig, PairSet, build_pair_set, evaluate_mafe, load_checkpoint, motion_vectors, save_checkpoint, train_mafe

__all__ = [
    "MAFE", "compose_middle", "coordinate_grid", "extract_motion_vector", "local_attention", "warp",
    "LossWeights", "laplacian_loss", "laplacian_pyramid", "reconstruct", "total_loss",
    "MAFEConfig", "PairSet", "build_pair_set", "evaluate_mafe", "load_checkpoint", "motion_vectors", "save_checkpoint",
    "train_mafe",
]
