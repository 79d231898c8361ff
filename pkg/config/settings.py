# config/settings.py
CONFIG_ENV_VAR = "MFTRACK_CONFIG"
LOG_FILE = "mftrack.log"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Dataset layout
COLOR_DIR = "color"
IR_DIR = "ir"
GROUNDTRUTH_FILE = "groundtruth.txt"
ATTRIBUTES_FILE = "attributes.txt"
MANIFEST_FILE = "manifest.json"
FRAME_NAME_FORMAT = "{:08d}.png"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

DEFAULT_TRAIN_ROOT = "data/toy/train"
DEFAULT_TEST_ROOT = "data/toy/test"
DEFAULT_RESULTS_ROOT = "results"
DEFAULT_CHECKPOINT_DIR = "checkpoints"

# Pseudo-TIR translation
LUMINANCE_WEIGHTS = (0.6, 0.3, 0.1)
BLUR_SIGMA = 2.0
CONTRAST_STRETCH = True

# Toy sequences
TOY_NUM_FRAMES = 40
TOY_IMAGE_SIZE = (128, 128)
TOY_TARGET_SIZE_RANGE = (12, 20)
TOY_MAX_SPEED = 3.0
TOY_JITTER = 0.5
TOY_DARKEN_FACTOR = 0.2
TOY_NOISE_STD = 0.05

# Backbone
BLOCK_CHANNEL_WIDTHS = (16, 32, 64, 64)
BLOCK_STRIDES = (2, 2, 2, 2)
FIRST_LAYER_KERNEL = 7
WEIGHT_INIT_SEED = 0

# Model predictor
FILTER_SIZE = 5
LABEL_SIGMA = 1.0
REG_LAMBDA = 0.01
OFFLINE_ITERATIONS = 5

# IoU head
IOU_REFERENCE_POOL = 5
IOU_TEST_POOL = 3
IOU_BRANCH_CHANNELS = 32
IOU_MODULATION_DIM = 64
IOU_HIDDEN_DIM = 64

# Training
N_FRAMES = 3
BATCH_SIZE = 4
TOTAL_STEPS = 1000
PRETRAIN_STEPS = 1000
LR_BACKBONE_RGB = 1e-3
LR_BACKBONE_TIR = 1e-3
LR_PREDICTOR = 1e-3
LR_IOU_HEAD = 1e-3
FINETUNE_GAIN = 0.001
IOU_LOSS_WEIGHT = 1.0
MOMENTUM = 0.9
# Global gradient-norm bound per step; 0 disables clipping
GRAD_CLIP_NORM = 10.0
CHECKPOINT_INTERVAL = 100
PROPOSALS_PER_FRAME = 16
PROPOSAL_SIGMA = 0.15
CENTER_JITTER = 0.25
SCALE_JITTER = 0.1

# Tracking
SEARCH_AREA_SCALE = 5.0
SEARCH_SIZE = 288
MEMORY_CAPACITY = 50
MEMORY_DECAY = 0.99
UPDATE_INTERVAL = 10
ONLINE_ITERATIONS = 2
INIT_ITERATIONS = 10
CONFIDENCE_THRESHOLD = 0.25
NUM_CANDIDATES = 10
CANDIDATE_JITTER = 0.1
REFINE_STEPS = 10
REFINE_STEP_SIZE = 0.25
REFINE_TOP_K = 3
INIT_AUGMENT_SHIFT = 0.25
INIT_AUGMENT_FLIP = True
MIN_BOX_SIZE = 1.0

# Evaluation
VOT_RUNS = 15
OPE_RUNS = 5
FAILURE_THRESHOLD = 0.0
REINIT_SKIP = 5
BURN_IN = 5
PRECISION_THRESHOLDS = 51
SUCCESS_THRESHOLDS = 101
PRECISION_REPORT_THRESHOLD = 20
EAO_PERCENTILES = (15.0, 85.0)
