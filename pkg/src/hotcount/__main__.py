import sys

from hotcount.cli import main

sys.exit(main())
