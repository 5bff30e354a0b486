import sys

from quadforge.cli import main

sys.exit(main())
