import sys

from motiontools.cli import main

sys.exit(main())
