import sys

from sphereloss.cli import main

sys.exit(main())
