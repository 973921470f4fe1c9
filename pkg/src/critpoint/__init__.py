"""Explainability-guided critical-point attacks on point-cloud classifiers."""

from .am import AmConfig, AmTrace, activation_maximize
from .attack import AttackConfig, AttackResult, CampaignReport, cta, opa, run_campaign, select_victims, targeted_variants
from .data import Dataset, PointCloud, generate_synthetic, synthetic_splits
from .defense import DefenseConfig, DefenseReport, detect_outliers, evaluate_defense
from .errors import CheckpointError, CritpointError, DegenerateInputError, NumericError, ParseError, ShapeError, VictimError
from .explain import Attribution, ExplainConfig, explain, gini, integrated_gradients, rank_critical
from .metrics import chamfer, hausdorff, perturbation_summary
from .model import Network, NetworkConfig, PoolingKind, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"
