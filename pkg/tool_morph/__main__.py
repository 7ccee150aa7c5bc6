import sys

from tool_morph.harness import main

sys.exit(main())
