import sys

from csfda.engine.cli import main

sys.exit(main())
