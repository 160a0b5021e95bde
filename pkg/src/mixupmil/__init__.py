"""Feature-level MixUp augmentation for multiple-instance learning on patch descriptor bags."""

from mixupmil.rng import RngStream
from mixupmil.bagstore import BagDataset, FeatureBag, SyntheticSpec
from mixupmil.augment import AugmentConfig

__all__ = ["RngStream", "FeatureBag", "BagDataset", "SyntheticSpec", "AugmentConfig"]
__version__ = "0.1.0"
