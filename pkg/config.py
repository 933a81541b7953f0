"""Global configuration options for the survey pipeline and CLI."""

# Backend defaults
API_KEY_ENV = "OPENAI_API_KEY"
DEFAULT_GENERATION_MODEL = "gpt-4o-mini"
DEFAULT_EMBEDDING_MODEL = "nomic-ai/nomic-embed-text-v1.5"
DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_TOKENS = 2048
DEFAULT_SEED = 0
MOCK_EMBEDDING_DIM = 64

# Transport retries: R retries after the first attempt, delay = base * 2**i
RETRY_LIMIT = 3
RETRY_BASE_DELAY = 0.25
# Re-prompts appended with the parse error before giving up
STRUCTURED_REPAIRS = 2

# Centralized file paths
PROMPT_DIR = "prompts"
CRITERIA_FILE = "criteria.json"
STORE_MANIFEST = "manifest.json"
STORE_VECTORS = "vectors.npy"
STORE_RECORDS = "records.jsonl"
STORE_FORMAT_VERSION = 1
SCORE_DECIMALS = 12

# Run directory layout
RUN_MANIFEST = "manifest.json"
RUN_CONFIG = "config.json"
RUN_LOCK = "run.lock"
TRACE_LOG = "trace.jsonl"
OUTLINE_DIR = "outlines"
POOL_DIR = "pool"
CARD_DIR = "cards"
DRAFT_DIR = "drafts"
VISUAL_DIR = "visuals"
SURVEY_FILE = "survey.md"
SURVEY_STATE = "survey.json"

# Outline loop defaults (desk scale)
RETRIEVAL_SIZE = 10
REFERENCE_SIZE = 5
BATCH_SIZE = 4
N_MIN = 10
N_MAX = 40
SIMILARITY_THRESHOLD = 0.5
MAX_SECTIONS = 8
MAX_OUTLINE_DEPTH = 3
# Paper-scale preset
PAPER_N_MIN = 1000
PAPER_N_MAX = 1200

# Outline similarity weights
SIM_TITLE_WEIGHT = 0.7
SIM_DEPTH_WEIGHT = 0.3

# Drafting
SECTION_RETRIEVAL_K = 60
TARGET_WORDS = 600
CARD_INPUT_CHARS = 4000

# Polish
REVIEW_ITERATIONS = 2
MAX_TABLE_COLS = 8
MAX_CELL_CHARS = 80
MAX_DIAGRAM_NODES = 24

# Arena
ELO_INITIAL = 1000.0
ELO_K = 32.0
ELO_SHUFFLES = 100
PAIR_SCOPE = "cross-only"
ARENA_LOG = "arena_outcomes.jsonl"
JUDGE_COUNT = 3

# Evaluation reports
EVAL_FILE = "evaluation.json"
SCORE_TABLE = "scores.md"
DRAFT_STATE = "document.json"
OUTLINE_STATE = "outline.json"
