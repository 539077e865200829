import sys

from varytoy.cli import main

sys.exit(main())
