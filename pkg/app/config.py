import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _optional_int(name, default=None):
    value = os.getenv(name)
    if value is None or value.strip().lower() in ('', 'none', 'inf', 'unbounded'):
        return default
    return int(value)


# Acoustic front end (synthetic features stand in for stacked logmels)
FRAME_MS = int(os.getenv('FRAME_MS', 30))
FEATURE_DIM = int(os.getenv('FEATURE_DIM', 16))

# Model sizes
MODEL_DIM = int(os.getenv('MODEL_DIM', 64))
NUM_HEADS = int(os.getenv('NUM_HEADS', 4))
FFN_DIM = int(os.getenv('FFN_DIM', 128))
NUM_LAYERS = int(os.getenv('NUM_LAYERS', 6))
MAX_RELATIVE_POSITION = int(os.getenv('MAX_RELATIVE_POSITION', 32))
LABEL_MODE = os.getenv('LABEL_MODE', 'transformer')
LABEL_CONTEXT = int(os.getenv('LABEL_CONTEXT', 3))
LABEL_LAYERS = int(os.getenv('LABEL_LAYERS', 1))
LAYER_NORM_EPS = float(os.getenv('LAYER_NORM_EPS', '1e-6'))

# Attention context
STREAMING_LEFT_CONTEXT = _optional_int('STREAMING_LEFT_CONTEXT', 64)
TRAINING_LEFT_CONTEXT = _optional_int('TRAINING_LEFT_CONTEXT', None)
OUTPUT_DELAY = int(os.getenv('OUTPUT_DELAY', 0))

# Decoding
SYMBOLS_PER_FRAME = int(os.getenv('SYMBOLS_PER_FRAME', 10))
BEAM_SIZE = int(os.getenv('BEAM_SIZE', 4))

# Training
LEARNING_RATE = float(os.getenv('LEARNING_RATE', '1e-3'))
ADAM_BETAS = (
    float(os.getenv('ADAM_BETA1', '0.9')),
    float(os.getenv('ADAM_BETA2', '0.98')),
)
BATCH_SIZE = int(os.getenv('BATCH_SIZE', 8))
TRAIN_STEPS = int(os.getenv('TRAIN_STEPS', 2000))
CHECKPOINT_EVERY = int(os.getenv('CHECKPOINT_EVERY', 500))

# Constrained alignment windows (frames); left unbounded by default
DEFAULT_WINDOW_LEFT = _optional_int('DEFAULT_WINDOW_LEFT', None)
DEFAULT_WINDOW_RIGHT = int(os.getenv('DEFAULT_WINDOW_RIGHT', 2))

# Application configuration
DEBUG_MODE = os.getenv('DEBUG_MODE', 'False').lower() == 'true'
PORT = int(os.getenv('PORT', 5000))
SESSION_IDLE_SECONDS = float(os.getenv('SESSION_IDLE_SECONDS', 300))
MAX_STREAM_SESSIONS = int(os.getenv('MAX_STREAM_SESSIONS', 32))
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

# Paths
DATA_DIR = os.getenv('DATA_DIR', 'data')
LOG_DIR = os.getenv('LOG_DIR', 'logs')
CHECKPOINT_DIR = os.getenv('CHECKPOINT_DIR', 'checkpoints')
CHECKPOINT_PATH = os.getenv('CHECKPOINT_PATH', os.path.join(CHECKPOINT_DIR, 'model.json'))


# Initialize configuration
def init_config():
    """Validate configuration and set up necessary directories"""
    positive_vars = [
        'FRAME_MS',
        'FEATURE_DIM',
        'MODEL_DIM',
        'NUM_HEADS',
        'FFN_DIM',
        'NUM_LAYERS',
        'LABEL_CONTEXT',
        'LABEL_LAYERS',
        'SYMBOLS_PER_FRAME',
        'BATCH_SIZE',
        'SESSION_IDLE_SECONDS',
        'MAX_STREAM_SESSIONS',
    ]

    invalid_vars = [var for var in positive_vars if globals().get(var, 0) <= 0]

    if invalid_vars:
        raise EnvironmentError(
            f"Configuration values must be positive: {', '.join(invalid_vars)}\n"
            f"Please fix these in a .env file or in your environment."
        )

    if MODEL_DIM % NUM_HEADS:
        raise EnvironmentError(
            f"MODEL_DIM ({MODEL_DIM}) must be divisible by NUM_HEADS ({NUM_HEADS})"
        )

    # Create necessary directories
    os.makedirs(DATA_DIR, exist_ok=True)
    os.makedirs(LOG_DIR, exist_ok=True)
    os.makedirs(CHECKPOINT_DIR, exist_ok=True)
