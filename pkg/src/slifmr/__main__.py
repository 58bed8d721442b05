import sys

from slifmr.cli import main

sys.exit(main())
