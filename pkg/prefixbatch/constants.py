# Token-batch size used for every policy unless overridden.
DEFAULT_CHUNK_SIZE = 2048
DEFAULT_BLOCK_SIZE = 16
DEFAULT_REQUEST_CAP = 256

# 2**16 blocks of 16 tokens, about one million tokens of KV context.
DEFAULT_TOTAL_BLOCKS = 65536

DEFAULT_VALLEY_ALPHA = 0.5

# Exhaustive set-partition search is Bell(n); ten requests is already 115975 partitions.
ORACLE_MAX_REQUESTS = 10

# Synthetic token ids are drawn from [sentinel range end, sentinel range end + VOCAB_SIZE).
SYNTHETIC_VOCAB_SIZE = 32000
MAX_TOKEN_ID = 2**32 - 1

SEED_ENV_VAR = 'PREFIXBATCH_SEED'
DEFAULT_SEED = 0

INDUSTRY_NUM_REQUESTS = 8000
INDUSTRY_MEAN_PREFIX_LEN = 1570
INDUSTRY_MEAN_DISTINCT_LEN = 30
INDUSTRY_MEAN_SHARING_DEGREE = 3.0
INDUSTRY_OUTPUT_LEN = 50

TRACE_COLUMNS = ('iteration', 'total_tokens', 'decode_tokens', 'prefill_tokens', 'blocks_used', 'active_requests')
