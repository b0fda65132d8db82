import sys

from estimators.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
