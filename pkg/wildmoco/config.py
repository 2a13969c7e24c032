import os

from dotenv import load_dotenv

load_dotenv()

env_prefix = "WILDMOCO_"

output_dir = os.getenv("WILDMOCO_OUT", "./runs")
number_proc = int(os.getenv("WILDMOCO_NUMBER_PROC", 1))
verbose = os.getenv("WILDMOCO_VERBOSE", "1") not in ("0", "false", "False", "")
cache_dir = os.getenv("WILDMOCO_CACHE_DIR", "")
