import sys

from labtamp.cli import main

sys.exit(main())
