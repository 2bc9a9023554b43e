import sys

from clknn.cli import main

sys.exit(main())
