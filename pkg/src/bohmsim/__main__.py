import sys

from bohmsim.cli import main

sys.exit(main())
