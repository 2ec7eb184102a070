import sys

from gcmtal.cli import main

sys.exit(main())
