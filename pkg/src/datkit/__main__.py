import sys

from datkit.cli import main

sys.exit(main())
