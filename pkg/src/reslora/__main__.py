import sys

from reslora.cli import main

sys.exit(main())
