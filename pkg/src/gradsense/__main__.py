import sys

from gradsense.cli import main

sys.exit(main())
