import sys

from sdvi.cli import main


sys.exit(main())
