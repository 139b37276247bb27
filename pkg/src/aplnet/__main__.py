import sys

from aplnet.cli import main

sys.exit(main())
