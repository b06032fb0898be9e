import sys

from hsglrt.cli import main

sys.exit(main())
