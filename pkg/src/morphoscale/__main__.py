import sys

from morphoscale.cli import main

sys.exit(main())
