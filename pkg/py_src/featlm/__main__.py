import sys

from featlm.cli import main

sys.exit(main())
