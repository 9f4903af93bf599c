import sys

from bpmpc.cli import main

sys.exit(main())
