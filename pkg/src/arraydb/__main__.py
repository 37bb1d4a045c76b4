import sys

from arraydb.cli import main

sys.exit(main())
