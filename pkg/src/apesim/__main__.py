import sys

from apesim.cli import main

sys.exit(main())
