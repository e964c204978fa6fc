import sys

from ditto.cli import main

if __name__ == "__main__":
    sys.exit(main())
