import sys

from mitokit.cli import main

sys.exit(main())
