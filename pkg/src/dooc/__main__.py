import sys

from dooc.cli import main

sys.exit(main())
