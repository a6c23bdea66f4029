import os
from dotenv import load_dotenv

load_dotenv()

VERSION = "0.3.0"

# Output directory override; when unset the config's output_dir (or DEFAULT_OUTPUT_DIR) is used
OUTPUT_DIR = os.getenv("PME_LAB_OUTPUT_DIR")
DEFAULT_OUTPUT_DIR = "results"
LOG_LEVEL = os.getenv("PME_LAB_LOG_LEVEL", "INFO")

# Grid solver
MIN_POINTS_PER_AXIS = 4
POSITIVITY_FLOOR = 0.5  # abort when min u drops below this fraction of min u0
CFL_SAFETY = 0.9

# Estimate checks
EARLY_TIME_CUTOFF = 0.05  # times below this are reported but never graded
DISCRETIZATION_TOL_FACTOR = 10.0  # tolerance = factor * (h^2 + dt)

# Monte Carlo
DEFAULT_PATHS = 2000
DEFAULT_SDE_T = 0.02
DEFAULT_SDE_DT = 1e-4
MIN_USABLE_PATHS = 100
ESCAPE_LIMIT = 0.01  # fraction of excluded paths above which a run is invalid
LOGL_CLIP = 30.0
TANGENT_TOLERANCE = 0.05  # Frobenius distance of K.J from identity
FLOW_TOLERANCE = 0.05
FLOW_FD_STEP = 1e-4
DEFAULT_CHECKPOINTS = 10
SIGMA_BAND = 3.0
MONOTONE_BAND = 2.0

# Reports
CSV_FLOAT_FORMAT = "%.17g"
