import sys

from fruitseg.cli import main

sys.exit(main())
