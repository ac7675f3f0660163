import os
from pathlib import Path
from dotenv import load_dotenv

# Загружаем .env из папки, где лежит config.py
env_path = Path(__file__).parent / ".env"
load_dotenv(dotenv_path=env_path)

# --- Nyström Sketch ---
SKETCH_M = int(os.getenv('SKETCH_M', 300))      # колонок в скетче
SKETCH_L = int(os.getenv('SKETCH_L', 200))      # ранг регуляризации W
SKETCH_S = int(os.getenv('SKETCH_S', 100))      # целевой ранг базиса D
SKETCH_SEED = int(os.getenv('SKETCH_SEED', 0))
SKETCH_SCHEME = os.getenv('SKETCH_SCHEME', 'uniform')

# --- Kernel ---
RANK_TOL = float(os.getenv('RANK_TOL', 1e-8))
STANDARDIZE = os.getenv('STANDARDIZE', 'true').lower() == 'true'
GRAM_CHUNK_ROWS = int(os.getenv('GRAM_CHUNK_ROWS', 4096))
EXACT_BASIS_MAX_N = int(os.getenv('EXACT_BASIS_MAX_N', 5000))

# --- ADMM Solver ---
SOLVER_SIGMA = float(os.getenv('SOLVER_SIGMA', 1e-6))
SOLVER_ALPHA = float(os.getenv('SOLVER_ALPHA', 1.6))
SOLVER_RHO = float(os.getenv('SOLVER_RHO', 0.1))
SOLVER_EPS_ABS = float(os.getenv('SOLVER_EPS_ABS', 1e-3))
SOLVER_EPS_REL = float(os.getenv('SOLVER_EPS_REL', 1e-3))
SOLVER_MAX_ITER = int(os.getenv('SOLVER_MAX_ITER', 20000))
SOLVER_ADAPTIVE_RHO = os.getenv('SOLVER_ADAPTIVE_RHO', 'true').lower() == 'true'
SOLVER_POLISH = os.getenv('SOLVER_POLISH', 'false').lower() == 'true'
SOLVER_HIGH_ACCURACY_EPS = float(os.getenv('SOLVER_HIGH_ACCURACY_EPS', 1e-6))
SOLVER_SCALING = os.getenv('SOLVER_SCALING', 'true').lower() == 'true'
ADAPTIVE_RHO_INTERVAL = int(os.getenv('ADAPTIVE_RHO_INTERVAL', 50))
ADAPTIVE_RHO_TOLERANCE = 5.0   # рефакторизация только при изменении ρ больше чем в 5 раз
INFEASIBILITY_CHECK_INTERVAL = int(os.getenv('INFEASIBILITY_CHECK_INTERVAL', 25))
EPS_PRIM_INF = float(os.getenv('EPS_PRIM_INF', 1e-4))
RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3             # ρ на строке Σw = 1

# --- Balancing ---
DEFAULT_DELTA = float(os.getenv('DEFAULT_DELTA', 0.0005))

# --- Propensity Model (GLM baseline) ---
PROPENSITY_CLIP = float(os.getenv('PROPENSITY_CLIP', 1e-6))
LOGIT_RIDGE = float(os.getenv('LOGIT_RIDGE', 1e-8))
LOGIT_MAX_ITER = int(os.getenv('LOGIT_MAX_ITER', 50))
LOGIT_TOL = float(os.getenv('LOGIT_TOL', 1e-8))
SEPARATION_COEF = float(os.getenv('SEPARATION_COEF', 30))

# --- Diagnostics ---
TASMD_THRESHOLD = float(os.getenv('TASMD_THRESHOLD', 0.1))

# --- Simulation ---
SIM_SEED = int(os.getenv('SIM_SEED', 2024))
SIM_REPS = int(os.getenv('SIM_REPS', 200))
SIM_N = int(os.getenv('SIM_N', 2000))
SIM_SOLVER_EPS = float(os.getenv('SIM_SOLVER_EPS', 1e-5))   # δ = 5e-4 требует допуска заметно меньше δ

# --- Runtime ---
THREADS = int(os.getenv('KERNBAL_THREADS', 1))
LOG_FILE = os.getenv('LOG_FILE', 'kernbal.log')
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
SLOW_TESTS = os.getenv('KERNBAL_SLOW', 'false').lower() in ('1', 'true')
