from .claims import ClaimResult, MissingCellError, check_directional_claims
from .config import (
    AttackSpec,
    TOY_NOISE_LEVELS,
    ConfigError,
    DefenseSpec,
    ExperimentConfig,
    default_defenses,
    load_config,
    parse_config,
    full_attack_rows,
)
from .grid import GridContext, GridSummary, run_grid
from .report import emit_report, write_reports
from .store import ExperimentRecord, ResultsStore, load_records, stable_view
