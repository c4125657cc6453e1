import sys

from gatedscale.cli import main

sys.exit(main())
