"""Explanation-guided episodic training for few-shot image classifiers.

The package bundles a small numpy tensor network stack, a layer-wise
relevance propagation engine, two metric-based few-shot heads, an
episodic trainer that re-weights features by their own explanation,
and the matching evaluation/reporting tools.
"""

from .data import (
    Episode,
    GeneratorSpec,
    LabeledImageSet,
    gen_synthetic_domains,
    load_dataset,
    sample_episode,
    save_dataset,
)
from .errors import ConfigError, ContractError, DataFormatError, NumericError
from .evaluation import (
    EvalReport,
    TransductiveConfig,
    evaluate,
    feature_stats,
    spatial_quantile_pool,
    transductive_infer,
)
from .heads import CosineHead, RelationHead
from .lrp import LrpConfig, lrp_backward, normalize_relevance
from .model import (
    FewShotModel,
    build_model,
    episode_probs,
    explain_input,
    load_model,
    save_model,
)
from .tensornet import Network, sgd_step
from .training import TrainConfig, train, train_episode, train_episode_plain

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataFormatError", "NumericError",
    "Episode", "GeneratorSpec", "LabeledImageSet", "gen_synthetic_domains",
    "load_dataset", "sample_episode", "save_dataset",
    "EvalReport", "TransductiveConfig", "evaluate", "feature_stats",
    "spatial_quantile_pool", "transductive_infer",
    "CosineHead", "RelationHead",
    "LrpConfig", "lrp_backward", "normalize_relevance",
    "FewShotModel", "build_model", "episode_probs", "explain_input",
    "load_model", "save_model",
    "Network", "sgd_step",
    "TrainConfig", "train", "train_episode", "train_episode_plain",
    "__version__",
]
