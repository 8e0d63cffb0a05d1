"""Constants for the LowFR toolkit."""

from typing import Final

# Package name, used for logger names and the config file section prefix
DOMAIN: Final = "lowfr"

# Environment
ENV_JOBS: Final = "LOWFR_JOBS"
DEFAULT_JOBS: Final = 1

# Model variants
VARIANT_LOWFR: Final = "lowfr"
VARIANT_LOWFR_SEX_INT: Final = "lowfr_sex_int"
VARIANT_DIRECT: Final = "direct"
VARIANT_CQR: Final = "cqr"
RANK_FULL: Final = "full"

# Hyperparameters of the full joint model
LOADING_VAR: Final = 10.0  # lambda_jh ~ N(0, 10)
INTERCEPT_COV_VAR: Final = 10.0  # mu and covariate coefficients ~ N(0, 10)
DIRECT_COEF_VAR: Final = 10.0  # beta / omega / theta entries of the direct model
IG_SHAPE: Final = 1.0
IG_RATE: Final = 1.0
XI_SHAPE: Final = 1.5
XI_RATE: Final = 1.5
A_SHAPE: Final = 2.0
A_RATE: Final = 1.0
SEX_TAU_SHAPE: Final = 2.0  # tau_sex ~ Gamma(2, 1)

# k selection
K_SELECT_THRESHOLD: Final = 0.9

# Transform guard: exp() overflows just above 709
SATURATION_LIMIT: Final = 700.0

# Sampler defaults
DEFAULT_CHAINS: Final = 4
DEFAULT_WARMUP: Final = 1000
DEFAULT_SAMPLES: Final = 1000
DEFAULT_TARGET_ACCEPT: Final = 0.8
DEFAULT_MAX_TREEDEPTH: Final = 10
DEFAULT_INIT_STEPSIZE: Final = 1.0
DIVERGENCE_THRESHOLD: Final = 1000.0
DIVERGENCE_WARN_FRACTION: Final = 0.1

# Dual averaging
DA_GAMMA: Final = 0.05
DA_T0: Final = 10.0
DA_KAPPA: Final = 0.75

# Windowed warmup (scaled down for short warmups)
WARMUP_INIT_BUFFER: Final = 75
WARMUP_TERM_BUFFER: Final = 50
WARMUP_BASE_WINDOW: Final = 25
WARMUP_SHORT_INIT_FRACTION: Final = 0.15
WARMUP_SHORT_TERM_FRACTION: Final = 0.1
WARMUP_MIN_ADAPT: Final = 20

# Effect summaries
INTERVAL_LEVEL: Final = 0.95
MIN_SUMMARY_DRAWS: Final = 100

# Cross-validation / benchmark
DEFAULT_FOLDS: Final = 10
BENCHMARK_FAIL_FRACTION: Final = 0.2

# Simulation defaults
SIM_N: Final = 200
SIM_P: Final = 10
SIM_T: Final = 3
SIM_K: Final = 5
SCENARIOS: Final = ("intro1", "intro2", "s1", "s2", "s3")

# CSV schema
COL_ID: Final = "id"
COL_Y: Final = "y"
PREFIX_COVARIATE: Final = "cov_"
PREFIX_EXPOSURE: Final = "x_"

# Fit directory layout
FILE_DATA: Final = "data.csv"
FILE_TRUTH: Final = "truth.csv"
FILE_CONFIG: Final = "config.resolved"
FILE_DRAWS: Final = "draws.csv"
FILE_DIAGNOSTICS: Final = "diagnostics.csv"
FILE_INDUCED: Final = "induced.csv"
FILE_INDUCED_FLAGGED: Final = "induced_flagged.csv"
FILE_IMPUTED: Final = "imputed.csv"
FILE_MODEL: Final = "model.json"
FILE_STANDARDIZATION: Final = "standardization.csv"
FILE_EFFECTS: Final = "effects.csv"
FILE_SURFACE: Final = "surface.csv"
FILE_PPC: Final = "ppc.csv"
FILE_PPC_CHECKS: Final = "ppc_checks.csv"
FILE_CV: Final = "cv.csv"
FILE_METRICS: Final = "metrics.csv"

# CSV float format; 17 significant digits round-trips every double
FLOAT_FORMAT: Final = "%.17g"

# Exit codes
EXIT_OK: Final = 0
EXIT_USAGE: Final = 2
EXIT_IO: Final = 3
EXIT_INFERENCE: Final = 4

# Commands and configuration keys
COMMANDS: Final = ("simulate", "fit", "effects", "ppc", "crossval", "benchmark")
CONF_SCENARIO: Final = "scenario"
CONF_SEED: Final = "seed"
CONF_N: Final = "n"
CONF_OUT: Final = "out"
CONF_DATA: Final = "data"
CONF_MODEL: Final = "model"
CONF_MODELS: Final = "models"
CONF_RANK: Final = "rank"
CONF_K: Final = "k"
CONF_CHAINS: Final = "chains"
CONF_WARMUP: Final = "warmup"
CONF_SAMPLES: Final = "samples"
CONF_TARGET_ACCEPT: Final = "target_accept"
CONF_MAX_TREEDEPTH: Final = "max_treedepth"
CONF_SEX_COL: Final = "sex_col"
CONF_SEX_INTERACTIONS: Final = "sex_interactions"
CONF_STANDARDIZE: Final = "standardize"
CONF_JOBS: Final = "jobs"
CONF_FIT: Final = "fit"
CONF_GROUPS: Final = "groups"
CONF_SURFACE: Final = "surface"
CONF_GRID_MIN: Final = "grid_min"
CONF_GRID_MAX: Final = "grid_max"
CONF_GRID_STEP: Final = "grid_step"
CONF_MODE: Final = "mode"
CONF_ORIGINAL_SCALE: Final = "original_scale"
CONF_FOLDS: Final = "folds"
CONF_REPS: Final = "reps"

K_AUTO: Final = "auto"
DEFAULT_GRID_MIN: Final = -2.0
DEFAULT_GRID_MAX: Final = 2.0
DEFAULT_GRID_STEP: Final = 0.25
DEFAULT_REPS: Final = 1
