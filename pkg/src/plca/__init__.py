"""plca: pleural-line clip analysis.

3D convolutional sparse coding via the Locally Competitive Algorithm, a
small from-scratch convolutional classifier, and clip-vote orchestration
for movement / no-movement video classification, plus a synthetic phantom
generator and bit-exact file formats.
"""

from .errors import (ConfigError, DivergenceError, ParseError, PlcaError,
                     ShapeError)
from .lca import ActivationMap, LcaConfig, lasso_oracle, lca_encode, threshold
from .dictionary import (Dictionary, DictLearnConfig, compare_dictionaries,
                         init_dictionary, learn)
from .classifier import (ClassifierParams, ClfTrainConfig, augment_clip,
                         bce_loss, train_classifier)
from .pipeline import (BoundingBox, ClipPrediction, PipelineConfig,
                       VideoPrediction, VideoTensor, classify_video, detect_roi,
                       evaluate, extract_clips, normalize, vote)
from .phantom import PhantomSpec, generate_dataset, generate_video

__version__ = "0.1.0"

__all__ = [
    "ActivationMap", "BoundingBox", "ClassifierParams", "ClfTrainConfig",
    "ClipPrediction", "ConfigError", "Dictionary", "DictLearnConfig",
    "DivergenceError", "LcaConfig", "ParseError", "PhantomSpec",
    "PipelineConfig", "PlcaError", "ShapeError", "VideoPrediction",
    "VideoTensor", "augment_clip", "bce_loss", "classify_video",
    "compare_dictionaries", "detect_roi", "evaluate", "extract_clips",
    "generate_dataset", "generate_video", "init_dictionary", "lasso_oracle",
    "lca_encode", "learn", "normalize", "threshold", "train_classifier",
    "vote",
]
