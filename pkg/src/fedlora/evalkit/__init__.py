# flake8: noqa
from .comparison import ComparisonTable, compare
from .metrics import EvalReport, VariantKind, accuracy, aggregate_metrics, evaluate_adapters
from .pca import PcaProjection, load_points, pca_updates
from .round_log import RoundLogRecord, load_round_log, round_log, save_round_log
