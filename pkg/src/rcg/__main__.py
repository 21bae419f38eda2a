"""``python -m rcg``"""

import sys

from .cli import main

sys.exit(main())
