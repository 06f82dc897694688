import sys

from tasktrace.cli import main

sys.exit(main())
