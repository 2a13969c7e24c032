import sys

from wildmoco.cli import main

sys.exit(main())
