import sys

from detrl.cli import main

sys.exit(main())
