import sys

from holm.cli import main

sys.exit(main())
