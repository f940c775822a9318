import sys

from gmixer.cli import main

sys.exit(main())
