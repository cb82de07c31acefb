import sys

from caflow.cli import main

sys.exit(main())
