"""Configuration settings for the in-vehicle keyword spotter."""
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(name, default))


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


# Directories
BASE_DIR = Path(__file__).parent
OUTPUT_DIR = Path(os.environ.get("KWS_OUTPUT_DIR", BASE_DIR / "outputs"))
MODEL_DIR = Path(os.environ.get("KWS_MODEL_DIR", BASE_DIR / "models"))

# Model file names inside MODEL_DIR
DNN_FILE = "kws_dnn.json"
VAD_SPEECH_FILE = "vad_speech.json"
VAD_NONSPEECH_FILE = "vad_nonspeech.json"

# Audio front end
# Only 16 kHz mono PCM16 is accepted; there is no resampler.
SAMPLE_RATE = 16000
FRAME_LEN_MS = _env_float("KWS_FRAME_LEN_MS", 30.0)
HOP_MS = _env_float("KWS_HOP_MS", 10.0)
N_FILTERS = _env_int("KWS_N_FILTERS", 40)
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 8000.0
ENERGY_FLOOR = 1e-10
PRE_EMPHASIS = _env_float("KWS_PRE_EMPHASIS", 0.97)  # 0 disables it
N_CEPSTRA = 13
DELTA_WINDOW = 2
CONTEXT_PAST = _env_int("KWS_CONTEXT_PAST", 30)
CONTEXT_FUTURE = _env_int("KWS_CONTEXT_FUTURE", 10)

# Voice activity detection
# `VAD_COMPONENTS`: mixture size of both the speech and the non-speech GMM
# `VAD_WINDOW_FRAMES` / `VAD_MAJORITY`: "most of them exceed a threshold"
# `VAD_HANGOVER_FRAMES`: below-threshold frames tolerated before a region closes
VAD_COMPONENTS = _env_int("KWS_VAD_COMPONENTS", 30)
VAD_EM_ITERS = _env_int("KWS_VAD_EM_ITERS", 100)
VAD_PRIOR_SPEECH = _env_float("KWS_VAD_PRIOR_SPEECH", 0.5)
VAD_THRESHOLD = _env_float("KWS_VAD_THRESHOLD", 0.5)
VAD_WINDOW_FRAMES = _env_int("KWS_VAD_WINDOW_FRAMES", 10)
VAD_MAJORITY = _env_float("KWS_VAD_MAJORITY", 0.6)
VAD_HANGOVER_FRAMES = _env_int("KWS_VAD_HANGOVER_FRAMES", 5)
VAD_MIN_FRAME_ENERGY = _env_float("KWS_VAD_MIN_FRAME_ENERGY", 1e-8)
VARIANCE_FLOOR = 1e-6

# DNN
HIDDEN_LAYERS = _env_int("KWS_HIDDEN_LAYERS", 3)
HIDDEN_NODES = _env_int("KWS_HIDDEN_NODES", 128)
N_LABELS = 3  # filler + two keyword sub-words
EPOCHS = _env_int("KWS_EPOCHS", 20)
LEARNING_RATE = _env_float("KWS_LEARNING_RATE", 0.02)
BATCH_SIZE = _env_int("KWS_BATCH_SIZE", 32)
MAX_FILLER_FRAMES = _env_int("KWS_MAX_FILLER_FRAMES", 30)  # per utterance

# Posterior handling
W_SMOOTH = _env_int("KWS_W_SMOOTH", 30)
W_MAX = _env_int("KWS_W_MAX", 100)
REFRACTORY_FRAMES = _env_int("KWS_REFRACTORY_FRAMES", 100)

# Sensitivities (detection fires when score >= 1 - sensitivity)
SEN_1 = _env_float("KWS_SEN_1", 0.495)
SEN_2 = _env_float("KWS_SEN_2", 0.58)
SINGLE_SENSITIVITIES = [0.495, 0.50, 0.52, 0.55, 0.57, 0.58]
SENSITIVITY_PAIRS = [
    (0.495, 0.50), (0.495, 0.52), (0.495, 0.55), (0.495, 0.57), (0.495, 0.58),
    (0.50, 0.52), (0.50, 0.55), (0.50, 0.57), (0.50, 0.58),
    (0.52, 0.55), (0.52, 0.57), (0.52, 0.58),
    (0.55, 0.57), (0.55, 0.58),
    (0.57, 0.58),
]

# Telemetry
# Thresholds are per one-second sample; they separate the generated straight
# and turning traces, they are not measured values.
S_THD = _env_float("KWS_S_THD", 0.5)
D_THD = _env_float("KWS_D_THD", 10.0)
STALENESS_LIMIT_S = _env_float("KWS_STALENESS_LIMIT_S", 5.0)
EARTH_RADIUS_M = 6_371_000.0
STATIONARY_DISTANCE_M = 0.1
GPS_RATE_HZ = 1.0

# Corpus
N_POSITIVE = _env_int("KWS_N_POSITIVE", 50)
N_NEGATIVE = _env_int("KWS_N_NEGATIVE", 50)
SNR_RANGE_DB = (5.0, 10.0)
INSIDE_MANEUVER_FRACTION = _env_float("KWS_INSIDE_MANEUVER_FRACTION", 0.3)
SEED = _env_int("KWS_SEED", 0)

# Evaluation
MSE_DDOF = 0  # 1 switches the "mean square error" to the sample variance
EVAL_WORKERS = _env_int("KWS_EVAL_WORKERS", 1)

# Logging
LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
