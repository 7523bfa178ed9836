WIRE_MAGIC = b"FDCV"
WIRE_VERSION = 1

COORDINATOR_ID = "coordinator"
BROADCAST = "*"

# Node attributes that look like handlers but are not message handlers.
HANDLERS_TO_SKIP = [
    "on_error",
    "on_start",
    "on_timeout",
]

DEFAULT_RHO = 1.0
DEFAULT_ADMM_ITERATIONS = 10
DEFAULT_VARIANCE_THRESHOLD = 0.8
DEFAULT_SCORE_COLUMN_CAP = 16

# Residual balancing for the adaptive penalty.
RHO_BALANCE_RATIO = 10.0
RHO_SCALING = 2.0

# Gram eigenvalues below this fraction of the largest are treated as zero.
EIGENVALUE_CUTOFF = 1e-12

LOG_ENV_VAR = "FEDCOV_LOG"
