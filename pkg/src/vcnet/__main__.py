import sys

from vcnet.main import main

sys.exit(main())
