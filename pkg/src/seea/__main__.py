import sys

from seea.cli import main

sys.exit(main())
