"""
Default settings for the pilot_tts project.

Every value here can be overridden from a key=value config file (dotted
lower-case keys, e.g. ``policy.min_snr_db=20`` overrides ``POLICY_MIN_SNR_DB``)
or from the command line (``--policy.min_snr_db=20``). See config.py.
"""

PROJECT_NAME = 'pilot_tts'

# Global seed; PTTS_SEED from the environment is used when nothing else sets it
SEED = 1234

# Logging (quiet by default)
LOG_LEVEL = 'WARNING'
LOG_FILE = None
PROGRESS = True

# Output locations
PATHS_CORPUS = 'corpus'
PATHS_CHECKPOINTS = 'checkpoints'
PATHS_REPORTS = 'reports'

# Audio / features
SAMPLE_RATE = 16000
MEL_N_FFT = 1024
MEL_HOP = 160           # 100 frames/s at 16 kHz
MEL_WIN = 640
MEL_N_MELS = 80
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
MEL_LOG_FLOOR = 1e-5
# Affine map into "normalized log-mel units"
MEL_NORM_MEAN = -6.0
MEL_NORM_STD = 3.0

# Curation scorers
VAD_FRAME_MS = 20.0
VAD_THRESH_DB = 30.0
VAD_MERGE_GAP_S = 0.1
TRUNCATION_EDGE_MS = 20.0
TRUNCATION_THRESH = 0.7
ROLLOFF_FRACTION = 0.95
CURATION_SCORERS = [
    'snr', 'rolloff', 'truncation', 'pseudo_mos', 'is_speech', 'overlap', 'synthetic',
]
CURATION_WORKERS = 1

# Filter policy (MOS threshold from the pipeline description, the rest are ours)
POLICY_MIN_PSEUDO_MOS = 3.5
POLICY_MIN_SNR_DB = 15.0
POLICY_MIN_ROLLOFF_HZ = 500.0
POLICY_REQUIRE_SPEECH = True
POLICY_REJECT_TRUNCATED = True
POLICY_REJECT_OVERLAP = True
POLICY_REJECT_SYNTHETIC = True
POLICY_REQUIRE_SPEAKER_CONSISTENT = False

# Synthetic corpus
CORPUS_SPEAKERS = 4
CORPUS_UTTS = 8
CORPUS_LANGS = ['zh', 'en']
CORPUS_TRUNCATED = 0
CORPUS_MANDARIN_PARALLEL = 3

# FSQ tokenizer
FSQ_D = 8
FSQ_K = 1
FSQ_HIDDEN = 64

# Reference conditioner
CONTENT_DIM = 64
SPEAKER_DIM = 64
FEATURIZER_SEED = 20240601
QFORMER_QUERIES = 32
QFORMER_HEADS = 4

# Autoregressive model
D_MODEL = 128
AR_HEADS = 4
AR_BLOCKS = 4
AR_CONTEXT = 1024
AR_VARIANT = 'full'
AR_PAIRING = 'cross_sample'

# Sampling
SAMPLING_TOP_K = 25
SAMPLING_TEMPERATURE = 1.0
SAMPLING_MAX_TOKENS = 250

# CFM decoder
CFM_D_MODEL = 128
CFM_BLOCKS = 4
CFM_HEADS = 4
CFM_SIGMA_MIN = 1e-4
CFM_STEPS = 10

# Optimisation
TRAIN_LR = 1e-3
TRAIN_BATCH = 8
TRAIN_CLIP_NORM = 1.0
TRAIN_STEPS_TOKENIZER = 1000
TRAIN_STEPS_AR = 2000
TRAIN_STEPS_CFM = 5000

# Vocoder smoke output
GRIFFIN_LIM_ITERS = 60

# Ablation harness
ABLATION_SEEDS = [0, 1, 2, 3, 4]
ABLATION_STEPS = 500
ABLATION_EVAL_UTTS = 8
